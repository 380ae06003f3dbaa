//! Discriminative RBM: an RBM whose visible layer is split into inputs `x` and a one-hot
//! class vector `y`.
//!
//! ```text
//! E(x, c, h) = -x.b_vis - h.b_hid - b_cls[c] - x^T W h - Wc[c, :].h
//! F(x, c)    = -b_cls[c] - sum_j softplus(b_hid[j] + Wc[c, j] + W[:, j].x)
//! ```
//!
//! Classification picks the class of minimum free energy; `P(c|x)` is the softmax of `-F`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmin, rng_from_seed, sample_bernoulli, sample_categorical, sigmoid, softmax_inplace, softplus};
use crate::rbm::{momentum_step1, momentum_step2, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DrbmParams {
    /// `V x H`
    pub weights: Array2<f64>,
    /// `C x H`
    pub class_weights: Array2<f64>,
    pub vis_bias: Array1<f64>,
    pub hid_bias: Array1<f64>,
    pub cls_bias: Array1<f64>,
}

pub type DrbmGradient = DrbmParams;

/// Training objective for the labeled part of the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Joint likelihood `log P(x, c)`, trained by CD.
    #[serde(alias = "gt")]
    Generative,
    /// Conditional likelihood `log P(c | x)`, exact gradient.
    #[serde(alias = "dt")]
    Discriminative,
}

impl Objective {
    pub fn short_name(self) -> &'static str {
        match self {
            Objective::Generative => "gt",
            Objective::Discriminative => "dt",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" | "generative" => Ok(Objective::Generative),
            "dt" | "discriminative" => Ok(Objective::Discriminative),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

/// Weight `beta` of the unsupervised term added to the labeled objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub beta: f64,
    pub objective: Objective,
}

impl SslConfig {
    pub const DEFAULT_BETA: f64 = 0.1;
    pub const BETA_GRID: [f64; 2] = [0.001, 0.1];

    pub fn new(beta: f64, objective: Objective) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        Ok(Self { beta, objective })
    }
}

impl DrbmParams {
    pub fn zeros(visible: usize, hidden: usize, classes: usize) -> Self {
        Self {
            weights: Array2::zeros((visible, hidden)),
            class_weights: Array2::zeros((classes, hidden)),
            vis_bias: Array1::zeros(visible),
            hid_bias: Array1::zeros(hidden),
            cls_bias: Array1::zeros(classes),
        }
    }

    /// Weights from `Normal(0, 0.01)`, biases zero.
    pub fn random<R: Rng + ?Sized>(visible: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let mut p = Self::zeros(visible, hidden, classes);
        p.weights.mapv_inplace(|_| normal.sample(rng));
        p.class_weights.mapv_inplace(|_| normal.sample(rng));
        p
    }

    pub fn num_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, h) = self.weights.dim();
        let c = self.class_weights.nrows();
        if c < 2 {
            return Err(Error::InvalidArgument("a DRBM needs at least two classes".into()));
        }
        if self.class_weights.ncols() != h {
            return Err(Error::dim("drbm class weights", h, self.class_weights.ncols()));
        }
        if self.vis_bias.len() != v {
            return Err(Error::dim("drbm visible bias", v, self.vis_bias.len()));
        }
        if self.hid_bias.len() != h {
            return Err(Error::dim("drbm hidden bias", h, self.hid_bias.len()));
        }
        if self.cls_bias.len() != c {
            return Err(Error::dim("drbm class bias", c, self.cls_bias.len()));
        }
        Ok(())
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.num_visible() {
            return Err(Error::dim("drbm input width", self.num_visible(), width));
        }
        Ok(())
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn energy(&self, x: ArrayView1<'_, f64>, c: usize, h: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_input(x.len())?;
        self.check_class(c)?;
        if h.len() != self.num_hidden() {
            return Err(Error::dim("drbm energy hidden", self.num_hidden(), h.len()));
        }
        Ok(-x.dot(&self.vis_bias)
            - h.dot(&self.hid_bias)
            - self.cls_bias[c]
            - x.dot(&self.weights).dot(&h)
            - self.class_weights.row(c).dot(&h))
    }

    pub fn free_energy(&self, x: ArrayView1<'_, f64>, c: usize) -> Result<f64> {
        self.check_input(x.len())?;
        self.check_class(c)?;
        let pre = x.dot(&self.weights) + &self.hid_bias;
        Ok(-self.cls_bias[c]
            - pre
                .iter()
                .zip(self.class_weights.row(c))
                .map(|(&p, &w)| softplus(p + w))
                .sum::<f64>())
    }

    /// `b_hid + x W` for every row of `batch`.
    pub fn hidden_preactivation(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(batch.ncols())?;
        let mut pre = batch.dot(&self.weights);
        pre += &self.hid_bias;
        Ok(pre)
    }

    /// `N x C` free energies from precomputed hidden preactivations.
    pub fn free_energies_from_pre(&self, pre: &Array2<f64>) -> Array2<f64> {
        let n = pre.nrows();
        let c = self.num_classes();
        let mut out = Array2::zeros((n, c));
        Zip::from(out.rows_mut()).and(pre.rows()).for_each(|mut f, p| {
            for (k, fk) in f.iter_mut().enumerate() {
                let wc = self.class_weights.row(k);
                let mut total = 0.0;
                for (&pj, &wj) in p.iter().zip(wc) {
                    total += softplus(pj + wj);
                }
                *fk = -self.cls_bias[k] - total;
            }
        });
        out
    }

    pub fn free_energies(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.free_energies_from_pre(&self.hidden_preactivation(batch)?))
    }

    pub fn class_posterior(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.class_posteriors(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Row-wise softmax of `-F`.
    pub fn class_posteriors(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut logits = self.free_energies(batch)?;
        logits.mapv_inplace(|f| -f);
        for row in logits.rows_mut() {
            softmax_inplace(row);
        }
        Ok(logits)
    }

    /// Argmin of the free energy; ties go to the smallest class index.
    pub fn classify(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        let f = self.free_energies(x.insert_axis(Axis(0)))?;
        Ok(argmin(f.row(0)))
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &DrbmParams) {
        self.weights.scaled_add(alpha, &other.weights);
        self.class_weights.scaled_add(alpha, &other.class_weights);
        self.vis_bias.scaled_add(alpha, &other.vis_bias);
        self.hid_bias.scaled_add(alpha, &other.hid_bias);
        self.cls_bias.scaled_add(alpha, &other.cls_bias);
    }

    /// Parameters in the order `W, Wc, b_vis, b_hid, b_cls`, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(&self.class_weights)
            .chain(&self.vis_bias)
            .chain(&self.hid_bias)
            .chain(&self.cls_bias)
            .copied()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
            + self.class_weights.len()
            + self.vis_bias.len()
            + self.hid_bias.len()
            + self.cls_bias.len()
    }

    /// Mutable access to the `i`-th entry in [`flatten`](Self::flatten) order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        let h = self.num_hidden();
        if i < self.weights.len() {
            return &mut self.weights[[i / h, i % h]];
        }
        i -= self.weights.len();
        if i < self.class_weights.len() {
            return &mut self.class_weights[[i / h, i % h]];
        }
        i -= self.class_weights.len();
        if i < self.vis_bias.len() {
            return &mut self.vis_bias[i];
        }
        i -= self.vis_bias.len();
        if i < self.hid_bias.len() {
            return &mut self.hid_bias[i];
        }
        &mut self.cls_bias[i - self.hid_bias.len()]
    }
}

fn check_batch(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    params.check_input(x.ncols())?;
    if labels.len() != x.nrows() {
        return Err(Error::dim("labels for batch", x.nrows(), labels.len()));
    }
    labels.iter().try_for_each(|&c| params.check_class(c))
}

/// Mean `-log P(c|x)` computed from free energies.
pub fn disc_loss(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_batch(params, x, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("disc_loss batch"));
    }
    let post = params.class_posteriors(x)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(n, &c)| -post[[n, c]].ln())
        .sum::<f64>()
        / labels.len() as f64)
}

/// Exact gradient of `-(1/N) sum log P(c_n | x_n)`.
///
/// With `s[c, j] = sigmoid(b_hid[j] + Wc[c, j] + W[:, j].x)` and `a_c = [c == c_n] - P(c|x_n)`,
/// the per-sample gradient is `sum_c a_c dF(x, c)/dtheta`. The visible bias does not enter
/// `P(c|x)` and gets an all-zero gradient.
pub fn disc_gradient(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<DrbmGradient> {
    check_batch(params, x, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("disc_gradient batch"));
    }
    let n = x.nrows();
    let nc = params.num_classes();
    let nh = params.num_hidden();
    let pre = params.hidden_preactivation(x)?;
    let mut grad = DrbmParams::zeros(params.num_visible(), nh, nc);
    let mut mix = Array2::<f64>::zeros((n, nh));
    let mut act = Array2::<f64>::zeros((nc, nh));
    let mut neg_f = Array1::<f64>::zeros(nc);
    for (i, &label) in labels.iter().enumerate() {
        let p = pre.row(i);
        for c in 0..nc {
            let mut total = 0.0;
            for j in 0..nh {
                let z = p[j] + params.class_weights[[c, j]];
                act[[c, j]] = sigmoid(z);
                total += softplus(z);
            }
            neg_f[c] = params.cls_bias[c] + total;
        }
        softmax_inplace(neg_f.view_mut());
        let mut row = mix.row_mut(i);
        for c in 0..nc {
            let a = if c == label { 1.0 } else { 0.0 } - neg_f[c];
            row.scaled_add(a, &act.row(c));
            grad.class_weights.row_mut(c).scaled_add(-a, &act.row(c));
            grad.cls_bias[c] -= a;
        }
    }
    let scale = 1.0 / n as f64;
    grad.weights = x.t().dot(&mix) * -scale;
    grad.hid_bias = mix.sum_axis(Axis(0)) * -scale;
    grad.class_weights *= scale;
    grad.cls_bias *= scale;
    Ok(grad)
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

fn hidden_given(params: &DrbmParams, x: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut pre = x.dot(&params.weights);
    pre += &params.hid_bias;
    for (mut row, &c) in pre.rows_mut().into_iter().zip(labels) {
        row += &params.class_weights.row(c);
        row.mapv_inplace(sigmoid);
    }
    pre
}

/// Sufficient statistics `(x h^T, y h^T, x, h, y)` summed over a batch.
fn joint_stats(x: &Array2<f64>, y: &Array2<f64>, h: &Array2<f64>) -> DrbmParams {
    DrbmParams {
        weights: x.t().dot(h),
        class_weights: y.t().dot(h),
        vis_bias: x.sum_axis(Axis(0)),
        hid_bias: h.sum_axis(Axis(0)),
        cls_bias: y.sum_axis(Axis(0)),
    }
}

/// Data-side statistics with the clamped class and `P(h|x, c)`, summed over the batch.
fn positive_stats(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> DrbmParams {
    let data = x.to_owned();
    let pos_h = hidden_given(params, &data, labels);
    joint_stats(&data, &one_hot(labels, params.num_classes()), &pos_h)
}

fn cd_joint<R: Rng + ?Sized>(
    params: &DrbmParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<DrbmGradient> {
    if k == 0 {
        return Err(Error::InvalidArgument("cd_k must be >= 1".into()));
    }
    let nc = params.num_classes();
    let mut grad = positive_stats(params, x, labels);

    let mut xs = sample_bernoulli(&x.to_owned(), rng);
    let mut ys: Vec<usize> = labels.to_vec();
    let mut hp = hidden_given(params, &xs, &ys);
    for _ in 0..k {
        let h = sample_bernoulli(&hp, rng);
        let mut xp = h.dot(&params.weights.t());
        xp += &params.vis_bias;
        xp.mapv_inplace(sigmoid);
        xs = sample_bernoulli(&xp, rng);
        let mut logits = h.dot(&params.class_weights.t());
        logits += &params.cls_bias;
        for (row, y) in logits.rows_mut().into_iter().zip(ys.iter_mut()) {
            let mut row = row;
            softmax_inplace(row.view_mut());
            *y = sample_categorical(row.view(), rng);
        }
        hp = hidden_given(params, &xs, &ys);
    }
    let neg = joint_stats(&xs, &one_hot(&ys, nc), &hp);
    grad.scaled_add(-1.0, &neg);
    let scale = -1.0 / labels.len() as f64;
    let mut out = DrbmParams::zeros(params.num_visible(), params.num_hidden(), nc);
    out.scaled_add(scale, &grad);
    Ok(out)
}

/// CD-k estimate of the gradient of `-(1/N) sum log P(x_n, c_n)`.
///
/// The negative chain alternates `h ~ P(h|x,y)`, `x ~ P(x|h)` and `c ~ softmax(b_cls + Wc h)`.
pub fn gen_gradient<R: Rng + ?Sized>(
    params: &DrbmParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<DrbmGradient> {
    check_batch(params, x, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("gen_gradient batch"));
    }
    cd_joint(params, x, labels, k, rng)
}

/// CD-k estimate of the gradient of `-(1/U) sum log P(u_n)`; the class is latent and the
/// positive phase draws it from `P(c|u)`.
pub fn unsup_gradient<R: Rng + ?Sized>(
    params: &DrbmParams,
    x: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
) -> Result<DrbmGradient> {
    params.check_input(x.ncols())?;
    if x.nrows() == 0 {
        return Err(Error::Empty("unsup_gradient batch"));
    }
    let post = params.class_posteriors(x)?;
    let labels: Vec<usize> = post.rows().into_iter().map(|p| sample_categorical(p, rng)).collect();
    cd_joint(params, x, &labels, k, rng)
}

/// Labeled-objective gradient plus `beta` times the unsupervised gradient. Either batch may
/// be empty, not both.
pub fn ssl_gradient<R: Rng + ?Sized>(
    params: &DrbmParams,
    labeled: ArrayView2<'_, f64>,
    labels: &[usize],
    unlabeled: ArrayView2<'_, f64>,
    config: &SslConfig,
    k: usize,
    rng: &mut R,
) -> Result<DrbmGradient> {
    if labeled.nrows() == 0 && unlabeled.nrows() == 0 {
        return Err(Error::Empty("ssl_gradient: both batches"));
    }
    let mut grad = if labeled.nrows() > 0 {
        match config.objective {
            Objective::Discriminative => disc_gradient(params, labeled, labels)?,
            Objective::Generative => gen_gradient(params, labeled, labels, k, rng)?,
        }
    } else {
        DrbmParams::zeros(params.num_visible(), params.num_hidden(), params.num_classes())
    };
    if unlabeled.nrows() > 0 && config.beta != 0.0 {
        grad.scaled_add(config.beta, &unsup_gradient(params, unlabeled, k, rng)?);
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct DrbmOptimizer {
    velocity: DrbmParams,
}

impl DrbmOptimizer {
    pub fn new(params: &DrbmParams) -> Self {
        Self {
            velocity: DrbmParams::zeros(params.num_visible(), params.num_hidden(), params.num_classes()),
        }
    }

    pub fn step(&mut self, params: &mut DrbmParams, grad: &DrbmGradient, cfg: &TrainConfig) {
        let v = &mut self.velocity;
        momentum_step2(&mut params.weights, &grad.weights, &mut v.weights, cfg, true);
        momentum_step2(&mut params.class_weights, &grad.class_weights, &mut v.class_weights, cfg, true);
        momentum_step1(&mut params.vis_bias, &grad.vis_bias, &mut v.vis_bias, cfg);
        momentum_step1(&mut params.hid_bias, &grad.hid_bias, &mut v.hid_bias, cfg);
        momentum_step1(&mut params.cls_bias, &grad.cls_bias, &mut v.cls_bias, cfg);
    }
}

/// Minibatch training of a DRBM. Each labeled minibatch is paired with the next unlabeled
/// minibatch of the same size (cycling) when `ssl` is set.
///
/// `forward` maps the trained parameters to the ones the gradient is evaluated at; pass the
/// identity for ordinary training or a quantizer for straight-through retraining.
#[allow(clippy::too_many_arguments)]
pub fn train_drbm_with(
    params: &DrbmParams,
    labeled: ArrayView2<'_, f64>,
    labels: &[usize],
    unlabeled: ArrayView2<'_, f64>,
    objective: Objective,
    ssl: Option<&SslConfig>,
    config: &TrainConfig,
    forward: &dyn Fn(&DrbmParams) -> DrbmParams,
) -> Result<DrbmParams> {
    config.validate()?;
    check_batch(params, labeled, labels)?;
    if labels.is_empty() {
        return Err(Error::Empty("labeled training set"));
    }
    let mut params = params.clone();
    if config.epochs == 0 {
        return Ok(params);
    }
    let ssl = ssl.filter(|s| s.beta > 0.0 && unlabeled.nrows() > 0);
    if ssl.is_some() {
        params.check_input(unlabeled.ncols())?;
    }
    let ssl_cfg = SslConfig {
        beta: ssl.map_or(0.0, |s| s.beta),
        objective,
    };
    let mut rng = rng_from_seed(config.seed);
    let mut opt = DrbmOptimizer::new(&params);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut u_order: Vec<usize> = (0..unlabeled.nrows()).collect();
    let mut u_pos = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = labeled.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let ub = if ssl.is_some() {
                let mut idx = Vec::with_capacity(chunk.len());
                for _ in 0..chunk.len().min(u_order.len()) {
                    if u_pos == 0 {
                        u_order.shuffle(&mut rng);
                    }
                    idx.push(u_order[u_pos]);
                    u_pos = (u_pos + 1) % u_order.len();
                }
                unlabeled.select(Axis(0), &idx)
            } else {
                Array2::zeros((0, params.num_visible()))
            };
            let at = forward(&params);
            let grad = ssl_gradient(&at, xb.view(), &yb, ub.view(), &ssl_cfg, config.cd_k, &mut rng)?;
            opt.step(&mut params, &grad, config);
        }
    }
    Ok(params)
}

pub fn train_drbm(
    params: &DrbmParams,
    labeled: ArrayView2<'_, f64>,
    labels: &[usize],
    unlabeled: ArrayView2<'_, f64>,
    objective: Objective,
    ssl: Option<&SslConfig>,
    config: &TrainConfig,
) -> Result<DrbmParams> {
    train_drbm_with(params, labeled, labels, unlabeled, objective, ssl, config, &|p| p.clone())
}

/// Exact-enumeration oracles over every `(x, c, h)` state of a tiny DRBM.
///
/// These never use the free-energy or sigmoid closed forms; they sum `exp(-E)` directly.
pub mod exact {
    use super::*;
    use crate::math::log_sum_exp;
    use crate::rbm::{binary_states, ENUMERATION_LIMIT};

    fn guard(params: &DrbmParams, with_visible: bool) -> Result<()> {
        let units = params.num_hidden() + if with_visible { params.num_visible() } else { 0 };
        if units > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                units,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(())
    }

    fn neg_energies(params: &DrbmParams, x: ArrayView1<'_, f64>, c: usize, hidden: &[Array1<f64>]) -> Result<Vec<f64>> {
        hidden.iter().map(|h| params.energy(x, c, h.view()).map(|e| -e)).collect()
    }

    /// `log sum_h exp(-E(x, c, h))`.
    pub fn log_marginal_xc(params: &DrbmParams, x: ArrayView1<'_, f64>, c: usize) -> Result<f64> {
        guard(params, false)?;
        let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
        Ok(log_sum_exp(neg_energies(params, x, c, &hidden)?))
    }

    /// `P(c|x)` by summing over every `(c, h)`.
    pub fn posterior(params: &DrbmParams, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        guard(params, false)?;
        let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
        let per_class = (0..params.num_classes())
            .map(|c| neg_energies(params, x, c, &hidden).map(log_sum_exp))
            .collect::<Result<Vec<_>>>()?;
        let norm = log_sum_exp(per_class.iter().copied());
        Ok(Array1::from_iter(per_class.into_iter().map(|l| (l - norm).exp())))
    }

    pub fn log_partition(params: &DrbmParams) -> Result<f64> {
        guard(params, true)?;
        let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
        let mut terms = Vec::new();
        for x in binary_states(params.num_visible()) {
            for c in 0..params.num_classes() {
                terms.extend(neg_energies(params, x.view(), c, &hidden)?);
            }
        }
        Ok(log_sum_exp(terms))
    }

    /// Mean `-log P(c|x)` (the discriminative loss).
    pub fn disc_nll(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        check_batch(params, x, labels)?;
        let mut total = 0.0;
        for (row, &c) in x.rows().into_iter().zip(labels) {
            total -= posterior(params, row)?[c].ln();
        }
        Ok(total / labels.len() as f64)
    }

    /// Mean `-log P(x, c)` (the generative loss).
    pub fn joint_nll(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        check_batch(params, x, labels)?;
        let log_z = log_partition(params)?;
        let mut total = 0.0;
        for (row, &c) in x.rows().into_iter().zip(labels) {
            total -= log_marginal_xc(params, row, c)? - log_z;
        }
        Ok(total / labels.len() as f64)
    }

    /// Mean `-log P(x)` with the class summed out (the unsupervised loss).
    pub fn marginal_nll(params: &DrbmParams, x: ArrayView2<'_, f64>) -> Result<f64> {
        params.check_input(x.ncols())?;
        let log_z = log_partition(params)?;
        let mut total = 0.0;
        for row in x.rows() {
            let per_class = (0..params.num_classes())
                .map(|c| log_marginal_xc(params, row, c))
                .collect::<Result<Vec<_>>>()?;
            total -= log_sum_exp(per_class) - log_z;
        }
        Ok(total / x.nrows() as f64)
    }

    fn add_state(acc: &mut DrbmParams, x: ArrayView1<'_, f64>, c: usize, h: &Array1<f64>, w: f64) {
        for i in 0..x.len() {
            acc.vis_bias[i] += w * x[i];
            for j in 0..h.len() {
                acc.weights[[i, j]] += w * x[i] * h[j];
            }
        }
        for j in 0..h.len() {
            acc.hid_bias[j] += w * h[j];
            acc.class_weights[[c, j]] += w * h[j];
        }
        acc.cls_bias[c] += w;
    }

    /// `E_model[-dE/dtheta]` under the full Boltzmann distribution.
    fn model_stats(params: &DrbmParams) -> Result<DrbmParams> {
        let log_z = log_partition(params)?;
        let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
        let mut acc = DrbmParams::zeros(params.num_visible(), params.num_hidden(), params.num_classes());
        for x in binary_states(params.num_visible()) {
            for c in 0..params.num_classes() {
                for (h, ne) in hidden.iter().zip(neg_energies(params, x.view(), c, &hidden)?) {
                    add_state(&mut acc, x.view(), c, h, (ne - log_z).exp());
                }
            }
        }
        Ok(acc)
    }

    fn data_stats(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> Result<DrbmParams> {
        let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
        let mut acc = DrbmParams::zeros(params.num_visible(), params.num_hidden(), params.num_classes());
        for (n, row) in x.rows().into_iter().enumerate() {
            let classes: Vec<usize> = match labels {
                Some(l) => vec![l[n]],
                None => (0..params.num_classes()).collect(),
            };
            let mut states = Vec::new();
            for &c in &classes {
                for (h, ne) in hidden.iter().zip(neg_energies(params, row, c, &hidden)?) {
                    states.push((c, h, ne));
                }
            }
            let norm = log_sum_exp(states.iter().map(|s| s.2));
            for (c, h, ne) in states {
                add_state(&mut acc, row, c, h, (ne - norm).exp());
            }
        }
        Ok(acc)
    }

    /// Exact gradient of [`joint_nll`].
    pub fn joint_nll_gradient(params: &DrbmParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<DrbmGradient> {
        check_batch(params, x, labels)?;
        let mut g = model_stats(params)?;
        g.scaled_add(-1.0 / labels.len() as f64, &data_stats(params, x, Some(labels))?);
        Ok(g)
    }

    /// Exact gradient of [`marginal_nll`].
    pub fn marginal_nll_gradient(params: &DrbmParams, x: ArrayView2<'_, f64>) -> Result<DrbmGradient> {
        params.check_input(x.ncols())?;
        let mut g = model_stats(params)?;
        g.scaled_add(-1.0 / x.nrows() as f64, &data_stats(params, x, None)?);
        Ok(g)
    }

    /// Central finite differences of `loss` over every parameter in `flatten` order.
    pub fn finite_difference(
        params: &DrbmParams,
        eps: f64,
        loss: &dyn Fn(&DrbmParams) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let mut probe = params.clone();
        (0..params.num_params())
            .map(|i| {
                let orig = *probe.param_mut(i);
                *probe.param_mut(i) = orig + eps;
                let up = loss(&probe)?;
                *probe.param_mut(i) = orig - eps;
                let down = loss(&probe)?;
                *probe.param_mut(i) = orig;
                Ok((up - down) / (2.0 * eps))
            })
            .collect()
    }
}
