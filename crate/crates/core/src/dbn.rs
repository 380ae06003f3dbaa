//! Discriminative deep belief network: lower RBMs feeding a top DRBM with a class layer.
//!
//! Inference is a deterministic mean-field pass through the lower RBMs followed by
//! minimum-free-energy classification at the top.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::drbm::{train_drbm, DrbmParams, Objective, SslConfig};
use crate::error::{Error, Result};
use crate::fixed_point::{BitwidthMap, BitwidthRecord};
use crate::math::{argmin, derive_seed, log_sum_exp, rng_from_seed};
use crate::rbm::{train_rbm, RbmParams, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub visible_size: usize,
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(visible_size: usize, layer_sizes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            visible_size,
            layer_sizes,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() {
            return Err(Error::InvalidArgument("need at least one hidden layer".into()));
        }
        if self.visible_size == 0 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }

    /// Parses `"200,100"` style hidden-layer lists.
    pub fn parse_layers(text: &str) -> Result<Vec<usize>> {
        text.split([',', '-'])
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidArgument(format!("bad layer size {t:?}: {e}")))
            })
            .collect()
    }

    /// Widths of the bitwidth map: every hidden layer, then the class layer.
    pub fn map_widths(&self) -> Vec<usize> {
        let mut w = self.layer_sizes.clone();
        w.push(self.num_classes);
        w
    }

    /// Input width of the top DRBM.
    pub fn top_input(&self) -> usize {
        if self.layer_sizes.len() == 1 {
            self.visible_size
        } else {
            self.layer_sizes[self.layer_sizes.len() - 2]
        }
    }
}

impl fmt::Display for Architecture {
    /// `DBN-200-100` style label.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DBN")?;
        for s in &self.layer_sizes {
            write!(f, "-{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbnModel {
    arch: Architecture,
    lower: Vec<RbmParams>,
    top: DrbmParams,
    seed: u64,
    bitwidths: Option<BitwidthMap>,
}

impl DbnModel {
    /// Assembles a model, checking that adjacent layer widths chain.
    pub fn from_parts(arch: Architecture, lower: Vec<RbmParams>, top: DrbmParams, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layer_sizes.len();
        if lower.len() != l - 1 {
            return Err(Error::dim("lower RBM count", l - 1, lower.len()));
        }
        let mut width = arch.visible_size;
        for (k, rbm) in lower.iter().enumerate() {
            rbm.validate()?;
            if rbm.num_visible() != width {
                return Err(Error::dim("lower RBM visible width", width, rbm.num_visible()));
            }
            if rbm.num_hidden() != arch.layer_sizes[k] {
                return Err(Error::dim("lower RBM hidden width", arch.layer_sizes[k], rbm.num_hidden()));
            }
            width = rbm.num_hidden();
        }
        top.validate()?;
        if top.num_visible() != width {
            return Err(Error::dim("top DRBM input width", width, top.num_visible()));
        }
        if top.num_hidden() != arch.layer_sizes[l - 1] {
            return Err(Error::dim("top DRBM hidden width", arch.layer_sizes[l - 1], top.num_hidden()));
        }
        if top.num_classes() != arch.num_classes {
            return Err(Error::dim("top DRBM classes", arch.num_classes, top.num_classes()));
        }
        Ok(Self {
            arch,
            lower,
            top,
            seed,
            bitwidths: None,
        })
    }

    /// Small-normal weights, zero biases, drawn from `seed`.
    pub fn random(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut width = arch.visible_size;
        let l = arch.layer_sizes.len();
        let mut lower = Vec::with_capacity(l - 1);
        for &h in &arch.layer_sizes[..l - 1] {
            lower.push(RbmParams::random(width, h, &mut rng));
            width = h;
        }
        let top = DrbmParams::random(width, arch.layer_sizes[l - 1], arch.num_classes, &mut rng);
        Self::from_parts(arch.clone(), lower, top, seed)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn lower(&self) -> &[RbmParams] {
        &self.lower
    }

    pub fn top(&self) -> &DrbmParams {
        &self.top
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bitwidths(&self) -> Option<&BitwidthMap> {
        self.bitwidths.as_ref()
    }

    pub fn set_bitwidths(&mut self, map: Option<BitwidthMap>) {
        self.bitwidths = map;
    }

    pub fn lower_mut(&mut self) -> &mut [RbmParams] {
        &mut self.lower
    }

    pub fn top_mut(&mut self) -> &mut DrbmParams {
        &mut self.top
    }

    /// Same architecture and metadata with replacement parameters of identical shapes.
    pub fn with_params(&self, lower: Vec<RbmParams>, top: DrbmParams) -> Self {
        debug_assert_eq!(lower.len(), self.lower.len());
        Self {
            arch: self.arch.clone(),
            lower,
            top,
            seed: self.seed,
            bitwidths: self.bitwidths.clone(),
        }
    }

    /// Mean-field input to the top DRBM for a single image.
    pub fn propagate(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.propagate_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Row-wise [`propagate`](Self::propagate).
    pub fn propagate_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.arch.visible_size {
            return Err(Error::dim("dbn input width", self.arch.visible_size, x.ncols()));
        }
        let mut act = x.to_owned();
        for rbm in &self.lower {
            act = rbm.hidden_probs(act.view())?;
        }
        Ok(act)
    }

    /// Activations after `layers` lower RBMs (0 means the raw input).
    pub fn propagate_partial(&self, x: ArrayView2<'_, f64>, layers: usize) -> Result<Array2<f64>> {
        let mut act = x.to_owned();
        for rbm in &self.lower[..layers] {
            act = rbm.hidden_probs(act.view())?;
        }
        Ok(act)
    }

    pub fn free_energies(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.top.free_energies(self.propagate_batch(x)?.view())
    }

    pub fn class_posteriors(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.top.class_posteriors(self.propagate_batch(x)?.view())
    }

    /// Minimum free energy class; ties go to the smallest index.
    pub fn classify(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(self.classify_batch(x.insert_axis(Axis(0)))?[0])
    }

    pub fn classify_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self
            .free_energies(x)?
            .rows()
            .into_iter()
            .map(argmin)
            .collect())
    }
}

/// Fraction of correctly classified images.
pub fn accuracy(model: &DbnModel, dataset: &Dataset) -> Result<f64> {
    let labels = dataset.require_labels()?;
    if labels.is_empty() {
        return Err(Error::Empty("accuracy dataset"));
    }
    let predicted = model.classify_batch(dataset.images().view())?;
    Ok(fraction_correct(&predicted, labels))
}

pub(crate) fn fraction_correct(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy and mean cross-entropy from an `N x C` free-energy matrix.
pub(crate) fn metrics_from_free_energies(free: &Array2<f64>, labels: &[usize]) -> (f64, f64) {
    let mut hits = 0usize;
    let mut ce = 0.0;
    for (row, &c) in free.rows().into_iter().zip(labels) {
        if argmin(row) == c {
            hits += 1;
        }
        ce += row[c] + log_sum_exp(row.iter().map(|f| -f));
    }
    let n = labels.len() as f64;
    (hits as f64 / n, ce / n)
}

/// Mean `-log P(label | x)`.
pub fn cross_entropy(model: &DbnModel, dataset: &Dataset) -> Result<f64> {
    let labels = dataset.require_labels()?;
    if labels.is_empty() {
        return Err(Error::Empty("cross_entropy dataset"));
    }
    let free = model.free_energies(dataset.images().view())?;
    Ok(metrics_from_free_energies(&free, labels).1)
}

/// Greedy layerwise training settings. Per-layer seeds are derived from `seed`, which
/// overrides the `seed` fields of the embedded [`TrainConfig`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbnTrainConfig {
    pub pretrain: TrainConfig,
    pub top: TrainConfig,
    pub objective: Objective,
    pub ssl: Option<SslConfig>,
    pub seed: u64,
}

impl Default for DbnTrainConfig {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::default(),
            top: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            objective: Objective::Generative,
            ssl: None,
            seed: 0,
        }
    }
}

const INIT_STREAM: u64 = 0;
const TOP_STREAM: u64 = 1_000;

/// Trains lower RBMs one at a time with CD on the propagated images, then the top DRBM on
/// `(propagated image, label)` pairs. Lower layers see the unlabeled images too when any
/// are given.
pub fn train_greedy(
    arch: &Architecture,
    labeled: &Dataset,
    unlabeled: &Dataset,
    config: &DbnTrainConfig,
) -> Result<DbnModel> {
    let labels = labeled.require_labels()?;
    if labels.is_empty() {
        return Err(Error::Empty("labeled training set"));
    }
    if labeled.dim() != arch.visible_size {
        return Err(Error::dim("training image width", arch.visible_size, labeled.dim()));
    }
    let mut model = DbnModel::random(arch, derive_seed(config.seed, INIT_STREAM))?;
    let mut all = labeled.concat_images(unlabeled)?;
    for k in 0..model.lower.len() {
        let cfg = TrainConfig {
            seed: derive_seed(config.seed, 1 + k as u64),
            ..config.pretrain.clone()
        };
        let trained = train_rbm(&model.lower[k], all.view(), &cfg)?;
        all = trained.hidden_probs(all.view())?;
        model.lower[k] = trained;
    }
    let top_in = model.propagate_batch(labeled.images().view())?;
    let unl_in = if unlabeled.is_empty() {
        Array2::zeros((0, arch.top_input()))
    } else {
        model.propagate_batch(unlabeled.images().view())?
    };
    let cfg = TrainConfig {
        seed: derive_seed(config.seed, TOP_STREAM),
        ..config.top.clone()
    };
    model.top = train_drbm(
        &model.top,
        top_in.view(),
        labels,
        unl_in.view(),
        config.objective,
        config.ssl.as_ref(),
        &cfg,
    )?;
    Ok(model)
}

/// Container format version written by [`DbnModel::to_json`].
pub const CONTAINER_VERSION: u32 = 1;
const CONTAINER_FORMAT: &str = "axdbn-model";

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn from2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn from1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    fn to2(&self, name: &str) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), self.data.clone())
                .map_err(|e| Error::Container(format!("{name}: {e}"))),
            _ => Err(Error::Container(format!("{name}: expected a 2-d shape"))),
        }
    }

    fn to1(&self, name: &str) -> Result<Array1<f64>> {
        match self.shape[..] {
            [n] if n == self.data.len() => Ok(Array1::from(self.data.clone())),
            _ => Err(Error::Container(format!("{name}: bad 1-d shape"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RbmRecord {
    weights: Tensor,
    vis_bias: Tensor,
    hid_bias: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrbmRecord {
    weights: Tensor,
    class_weights: Tensor,
    vis_bias: Tensor,
    hid_bias: Tensor,
    cls_bias: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    arch: Architecture,
    seed: u64,
    lower: Vec<RbmRecord>,
    top: DrbmRecord,
    bitwidths: Option<Vec<BitwidthRecord>>,
}

impl DbnModel {
    /// Serializes to the versioned JSON container: architecture, seed, every parameter
    /// array as `{shape, data}` in row-major order, and the optional bitwidth map as
    /// `(layer, neuron, bits)` records.
    pub fn to_json(&self) -> Result<String> {
        let c = Container {
            format: CONTAINER_FORMAT.into(),
            version: CONTAINER_VERSION,
            arch: self.arch.clone(),
            seed: self.seed,
            lower: self
                .lower
                .iter()
                .map(|r| RbmRecord {
                    weights: Tensor::from2(&r.weights),
                    vis_bias: Tensor::from1(&r.vis_bias),
                    hid_bias: Tensor::from1(&r.hid_bias),
                })
                .collect(),
            top: DrbmRecord {
                weights: Tensor::from2(&self.top.weights),
                class_weights: Tensor::from2(&self.top.class_weights),
                vis_bias: Tensor::from1(&self.top.vis_bias),
                hid_bias: Tensor::from1(&self.top.hid_bias),
                cls_bias: Tensor::from1(&self.top.cls_bias),
            },
            bitwidths: self.bitwidths.as_ref().map(BitwidthMap::to_records),
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container = serde_json::from_str(text)?;
        if c.format != CONTAINER_FORMAT {
            return Err(Error::Container(format!("unknown format {:?}", c.format)));
        }
        if c.version != CONTAINER_VERSION {
            return Err(Error::Container(format!("unsupported version {}", c.version)));
        }
        let lower = c
            .lower
            .iter()
            .map(|r| {
                Ok(RbmParams {
                    weights: r.weights.to2("lower.weights")?,
                    vis_bias: r.vis_bias.to1("lower.vis_bias")?,
                    hid_bias: r.hid_bias.to1("lower.hid_bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let top = DrbmParams {
            weights: c.top.weights.to2("top.weights")?,
            class_weights: c.top.class_weights.to2("top.class_weights")?,
            vis_bias: c.top.vis_bias.to1("top.vis_bias")?,
            hid_bias: c.top.hid_bias.to1("top.hid_bias")?,
            cls_bias: c.top.cls_bias.to1("top.cls_bias")?,
        };
        let mut model = Self::from_parts(c.arch, lower, top, c.seed)?;
        if let Some(records) = c.bitwidths {
            let map = BitwidthMap::from_records(&records)?;
            crate::fixed_point::check_map_shape(&model, &map)?;
            model.bitwidths = Some(map);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
