//! Binary restricted Boltzmann machine: mean-field activations, Gibbs sampling,
//! contrastive divergence and an exact-enumeration oracle for tiny models.
//!
//! Energy: `E(v, h) = -v.b_vis - h.b_hid - v^T W h`, with `W` stored visible-by-hidden.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, rng_from_seed, sample_bernoulli, sigmoid};

/// Largest `V + H` accepted by the enumeration oracles.
pub const ENUMERATION_LIMIT: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    /// `V x H`
    pub weights: Array2<f64>,
    pub vis_bias: Array1<f64>,
    pub hid_bias: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type RbmGradient = RbmParams;

impl RbmParams {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((visible, hidden)),
            vis_bias: Array1::zeros(visible),
            hid_bias: Array1::zeros(hidden),
        }
    }

    /// Weights from `Normal(0, 0.01)`, biases zero.
    pub fn random<R: Rng + ?Sized>(visible: usize, hidden: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        Self {
            weights: Array2::from_shape_simple_fn((visible, hidden), || normal.sample(rng)),
            vis_bias: Array1::zeros(visible),
            hid_bias: Array1::zeros(hidden),
        }
    }

    pub fn num_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, h) = self.weights.dim();
        if self.vis_bias.len() != v {
            return Err(Error::dim("rbm visible bias", v, self.vis_bias.len()));
        }
        if self.hid_bias.len() != h {
            return Err(Error::dim("rbm hidden bias", h, self.hid_bias.len()));
        }
        let finite = self.weights.iter().chain(&self.vis_bias).chain(&self.hid_bias).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("rbm parameters must be finite".into()));
        }
        Ok(())
    }

    /// `sigmoid(b_hid + W^T v)`.
    pub fn hidden_activation(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if v.len() != self.num_visible() {
            return Err(Error::dim("hidden_activation input", self.num_visible(), v.len()));
        }
        Ok((v.dot(&self.weights) + &self.hid_bias).mapv(sigmoid))
    }

    /// Row-wise [`hidden_activation`](Self::hidden_activation) for an `N x V` batch.
    pub fn hidden_probs(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.num_visible() {
            return Err(Error::dim("rbm batch width", self.num_visible(), batch.ncols()));
        }
        let mut pre = batch.dot(&self.weights);
        pre += &self.hid_bias;
        pre.mapv_inplace(sigmoid);
        Ok(pre)
    }

    /// `sigmoid(b_vis + W h)` for an `N x H` batch of hidden states.
    pub fn visible_probs(&self, hidden: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if hidden.ncols() != self.num_hidden() {
            return Err(Error::dim("rbm hidden batch width", self.num_hidden(), hidden.ncols()));
        }
        let mut pre = hidden.dot(&self.weights.t());
        pre += &self.vis_bias;
        pre.mapv_inplace(sigmoid);
        Ok(pre)
    }

    pub fn energy(&self, v: ArrayView1<'_, f64>, h: ArrayView1<'_, f64>) -> Result<f64> {
        if v.len() != self.num_visible() {
            return Err(Error::dim("energy visible", self.num_visible(), v.len()));
        }
        if h.len() != self.num_hidden() {
            return Err(Error::dim("energy hidden", self.num_hidden(), h.len()));
        }
        Ok(-v.dot(&self.vis_bias) - h.dot(&self.hid_bias) - v.dot(&self.weights).dot(&h))
    }

    /// One alternating Gibbs sweep from binary `v`: `h ~ P(h|v)`, then `v' ~ P(v|h)`.
    pub fn gibbs_step<R: Rng + ?Sized>(
        &self,
        v: ArrayView1<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let hp = self.hidden_probs(v.insert_axis(Axis(0)))?;
        let h = sample_bernoulli(&hp, rng);
        let vp = self.visible_probs(h.view())?;
        let v_next = sample_bernoulli(&vp, rng);
        Ok((h.row(0).to_owned(), v_next.row(0).to_owned()))
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &RbmParams) {
        self.weights.scaled_add(alpha, &other.weights);
        self.vis_bias.scaled_add(alpha, &other.vis_bias);
        self.hid_bias.scaled_add(alpha, &other.hid_bias);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(&self.vis_bias)
            .chain(&self.hid_bias)
            .copied()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.vis_bias.len() + self.hid_bias.len()
    }

    /// Mutable access to the `i`-th entry of [`flatten`](Self::flatten)'s order.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        let nv = self.vis_bias.len();
        if i < nw {
            let h = self.num_hidden();
            &mut self.weights[[i / h, i % h]]
        } else if i < nw + nv {
            &mut self.vis_bias[i - nw]
        } else {
            &mut self.hid_bias[i - nw - nv]
        }
    }
}

/// Hyperparameters for minibatch SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cd_k: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 20,
            cd_k: 1,
            momentum: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.cd_k == 0 {
            return Err(Error::InvalidArgument("cd_k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Momentum update `vel = m*vel - lr*(grad + wd*w)`, `param += vel`. Decay applies to
/// weight matrices only.
pub(crate) fn momentum_step2(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    vel: &mut Array2<f64>,
    cfg: &TrainConfig,
    decay: bool,
) {
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    ndarray::Zip::from(&mut *vel)
        .and(grad)
        .and(&*param)
        .for_each(|v, &g, &p| *v = cfg.momentum * *v - cfg.learning_rate * (g + wd * p));
    *param += &*vel;
}

pub(crate) fn momentum_step1(param: &mut Array1<f64>, grad: &Array1<f64>, vel: &mut Array1<f64>, cfg: &TrainConfig) {
    ndarray::Zip::from(&mut *vel)
        .and(grad)
        .for_each(|v, &g| *v = cfg.momentum * *v - cfg.learning_rate * g);
    *param += &*vel;
}

/// Momentum state for [`RbmParams`].
#[derive(Debug, Clone)]
pub struct RbmOptimizer {
    velocity: RbmParams,
}

impl RbmOptimizer {
    pub fn new(params: &RbmParams) -> Self {
        Self {
            velocity: RbmParams::zeros(params.num_visible(), params.num_hidden()),
        }
    }

    pub fn step(&mut self, params: &mut RbmParams, grad: &RbmGradient, cfg: &TrainConfig) {
        momentum_step2(&mut params.weights, &grad.weights, &mut self.velocity.weights, cfg, true);
        momentum_step1(&mut params.vis_bias, &grad.vis_bias, &mut self.velocity.vis_bias, cfg);
        momentum_step1(&mut params.hid_bias, &grad.hid_bias, &mut self.velocity.hid_bias, cfg);
    }
}

/// CD-k estimate of the gradient of the mean negative log-likelihood over `batch`.
///
/// Positive statistics use the data (as probabilities) and `P(h|v)`; the chain starts from a
/// Bernoulli sample of the data and the negative statistics use the final visible sample with
/// its hidden probabilities.
pub fn cd_gradient<R: Rng + ?Sized>(
    params: &RbmParams,
    batch: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
) -> Result<RbmGradient> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("cd_gradient batch"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("cd_k must be >= 1".into()));
    }
    let n = batch.nrows() as f64;
    let pos_h = params.hidden_probs(batch)?;
    let mut v = sample_bernoulli(&batch.to_owned(), rng);
    let mut hp = params.hidden_probs(v.view())?;
    for _ in 0..k {
        let h = sample_bernoulli(&hp, rng);
        let vp = params.visible_probs(h.view())?;
        v = sample_bernoulli(&vp, rng);
        hp = params.hidden_probs(v.view())?;
    }
    let mut weights = v.t().dot(&hp);
    weights -= &batch.t().dot(&pos_h);
    weights /= n;
    let vis_bias = (v.sum_axis(Axis(0)) - batch.sum_axis(Axis(0))) / n;
    let hid_bias = (hp.sum_axis(Axis(0)) - pos_h.sum_axis(Axis(0))) / n;
    Ok(RbmParams {
        weights,
        vis_bias,
        hid_bias,
    })
}

/// All binary vectors of length `n`, bit `i` of the counter mapping to entry `i`.
pub(crate) fn binary_states(n: usize) -> impl Iterator<Item = Array1<f64>> {
    (0u64..(1u64 << n)).map(move |s| Array1::from_shape_fn(n, |i| ((s >> i) & 1) as f64))
}

fn enumeration_guard(units: usize) -> Result<()> {
    if units > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            units,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

fn check_data(params: &RbmParams, data: ArrayView2<'_, f64>) -> Result<()> {
    if data.nrows() == 0 {
        return Err(Error::Empty("enumeration data"));
    }
    if data.ncols() != params.num_visible() {
        return Err(Error::dim("enumeration data width", params.num_visible(), data.ncols()));
    }
    Ok(())
}

type JointState = (Array1<f64>, Array1<f64>, f64);

/// Every `(v, h)` joint state with its negative energy.
fn joint_table(params: &RbmParams) -> Result<Vec<JointState>> {
    let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
    let mut table = Vec::new();
    for v in binary_states(params.num_visible()) {
        for h in &hidden {
            let neg_e = -params.energy(v.view(), h.view())?;
            table.push((v.clone(), h.clone(), neg_e));
        }
    }
    Ok(table)
}

/// Mean `log P(v)` over binary `data`, with `Z` summed over every `(v, h)` state.
pub fn exact_log_likelihood(params: &RbmParams, data: ArrayView2<'_, f64>) -> Result<f64> {
    enumeration_guard(params.num_visible() + params.num_hidden())?;
    check_data(params, data)?;
    let log_z = log_sum_exp(joint_table(params)?.into_iter().map(|(_, _, e)| e));
    let hidden: Vec<_> = binary_states(params.num_hidden()).collect();
    let mut total = 0.0;
    for v in data.rows() {
        let log_unnorm = log_sum_exp(
            hidden
                .iter()
                .map(|h| params.energy(v, h.view()).map(|e| -e))
                .collect::<Result<Vec<_>>>()?,
        );
        total += log_unnorm - log_z;
    }
    Ok(total / data.nrows() as f64)
}

/// Exact gradient of the mean negative log-likelihood, by enumeration.
pub fn exact_gradient(params: &RbmParams, data: ArrayView2<'_, f64>) -> Result<RbmGradient> {
    enumeration_guard(params.num_visible() + params.num_hidden())?;
    check_data(params, data)?;
    let (nv, nh) = params.weights.dim();
    let table = joint_table(params)?;
    let log_z = log_sum_exp(table.iter().map(|t| t.2));

    let mut model = RbmParams::zeros(nv, nh);
    for (v, h, neg_e) in &table {
        let p = (neg_e - log_z).exp();
        add_outer(&mut model, v, h, p);
    }

    let hidden: Vec<_> = binary_states(nh).collect();
    let mut data_stats = RbmParams::zeros(nv, nh);
    for v in data.rows() {
        let neg: Vec<f64> = hidden
            .iter()
            .map(|h| params.energy(v, h.view()).map(|e| -e))
            .collect::<Result<_>>()?;
        let log_norm = log_sum_exp(neg.iter().copied());
        for (h, ne) in hidden.iter().zip(&neg) {
            add_outer(&mut data_stats, &v.to_owned(), h, (ne - log_norm).exp());
        }
    }
    let n = data.nrows() as f64;
    model.scaled_add(-1.0 / n, &data_stats);
    Ok(model)
}

fn add_outer(acc: &mut RbmParams, v: &Array1<f64>, h: &Array1<f64>, p: f64) {
    for i in 0..v.len() {
        acc.vis_bias[i] += p * v[i];
        for j in 0..h.len() {
            acc.weights[[i, j]] += p * v[i] * h[j];
        }
    }
    for j in 0..h.len() {
        acc.hid_bias[j] += p * h[j];
    }
}

/// Minibatch CD-k training; rows of `data` are visible vectors.
pub fn train_rbm(params: &RbmParams, data: ArrayView2<'_, f64>, config: &TrainConfig) -> Result<RbmParams> {
    train_rbm_with(params, data, config, &|p| p.clone())
}

/// [`train_rbm`] with gradients evaluated at `forward(params)` instead of `params`; used for
/// straight-through quantization-aware retraining.
pub fn train_rbm_with(
    params: &RbmParams,
    data: ArrayView2<'_, f64>,
    config: &TrainConfig,
    forward: &dyn Fn(&RbmParams) -> RbmParams,
) -> Result<RbmParams> {
    config.validate()?;
    if data.ncols() != params.num_visible() {
        return Err(Error::dim("train_rbm data width", params.num_visible(), data.ncols()));
    }
    let mut params = params.clone();
    if config.epochs == 0 || data.nrows() == 0 {
        return Ok(params);
    }
    let mut rng = rng_from_seed(config.seed);
    let mut opt = RbmOptimizer::new(&params);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(Axis(0), chunk);
            let grad = cd_gradient(&forward(&params), batch.view(), config.cd_k, &mut rng)?;
            opt.step(&mut params, &grad, config);
        }
    }
    Ok(params)
}
