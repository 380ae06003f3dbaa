//! Q(m.n) fixed-point formats, the bitwidth search space and per-neuron bitwidth maps.
//!
//! A Q(m.n) value is a two's-complement code `k` of `m + n` bits scaled by `2^-n`, so the
//! sign lives inside the `m` integer bits. Quantized parameters are carried as `f64`
//! values that sit exactly on the `2^-n` grid.

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dbn::DbnModel;
use crate::drbm::DrbmParams;
use crate::error::{Error, Result};
use crate::rbm::RbmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    int_bits: u32,
    frac_bits: u32,
}

impl FixedPointFormat {
    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        if int_bits < 1 {
            return Err(Error::InvalidArgument(
                "fixed-point format needs at least one integer (sign) bit".into(),
            ));
        }
        if int_bits + frac_bits > 64 {
            return Err(Error::InvalidArgument(format!(
                "Q({int_bits}.{frac_bits}) exceeds 64 bits"
            )));
        }
        Ok(Self {
            int_bits,
            frac_bits,
        })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        -((self.int_bits - 1) as f64).exp2()
    }

    /// Largest representable value, `2^(m-1) - 2^-n`. Rounds to `2^(m-1)` in `f64` once
    /// `m + n > 53`.
    pub fn max_value(&self) -> f64 {
        ((self.int_bits - 1) as f64).exp2() - self.step()
    }

    /// Nearest representable value; ties round half-to-even on the integer code and
    /// out-of-range inputs saturate.
    pub fn quantize(&self, x: f64) -> f64 {
        if x.is_nan() {
            return 0.0;
        }
        let scale = (self.frac_bits as f64).exp2();
        let half_range = ((self.total_bits() - 1) as f64).exp2();
        let code = (x * scale).round_ties_even().clamp(-half_range, half_range - 1.0);
        code / scale
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q({}.{})", self.int_bits, self.frac_bits)
    }
}

/// One point of the bitwidth search space. `Pruned` removes the neuron entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitwidthLevel {
    Pruned,
    Bits4,
    Bits8,
    Bits12,
    Bits16,
    Bits32,
    Bits64,
}

impl BitwidthLevel {
    pub const ALL: [BitwidthLevel; 7] = [
        BitwidthLevel::Pruned,
        BitwidthLevel::Bits4,
        BitwidthLevel::Bits8,
        BitwidthLevel::Bits12,
        BitwidthLevel::Bits16,
        BitwidthLevel::Bits32,
        BitwidthLevel::Bits64,
    ];

    pub fn bits(self) -> u32 {
        match self {
            BitwidthLevel::Pruned => 0,
            BitwidthLevel::Bits4 => 4,
            BitwidthLevel::Bits8 => 8,
            BitwidthLevel::Bits12 => 12,
            BitwidthLevel::Bits16 => 16,
            BitwidthLevel::Bits32 => 32,
            BitwidthLevel::Bits64 => 64,
        }
    }

    /// The bound Q(m.n) format; `None` for a pruned neuron.
    pub fn format(self) -> Option<FixedPointFormat> {
        let (m, n) = match self {
            BitwidthLevel::Pruned => return None,
            BitwidthLevel::Bits4 => (2, 2),
            BitwidthLevel::Bits8 => (2, 6),
            BitwidthLevel::Bits12 => (6, 6),
            BitwidthLevel::Bits16 => (8, 8),
            BitwidthLevel::Bits32 => (8, 24),
            BitwidthLevel::Bits64 => (8, 56),
        };
        Some(FixedPointFormat {
            int_bits: m,
            frac_bits: n,
        })
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        BitwidthLevel::ALL
            .into_iter()
            .find(|l| l.bits() == bits)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{bits} is not a bitwidth level (expected one of 0,4,8,12,16,32,64)"
                ))
            })
    }

    /// Parses a comma-separated list such as `0,4,8` into a sorted, deduplicated level set.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let mut levels = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::InvalidArgument(format!("bad level {t:?}: {e}")))
                    .and_then(Self::from_bits)
            })
            .collect::<Result<Vec<_>>>()?;
        levels.sort();
        levels.dedup();
        Ok(levels)
    }
}

impl TryFrom<u32> for BitwidthLevel {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        Self::from_bits(bits)
    }
}

impl From<BitwidthLevel> for u32 {
    fn from(level: BitwidthLevel) -> u32 {
        level.bits()
    }
}

/// Quantizes `x` to `level`, or returns exactly zero when the level is `Pruned`.
pub fn quantize_value(x: f64, level: BitwidthLevel) -> f64 {
    level.format().map_or(0.0, |f| f.quantize(x))
}

/// Position of a neuron in the map. Layers `0..L` are the hidden layers bottom-up;
/// layer `L` is the class layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}", self.layer, self.index)
    }
}

/// Flat serialized form of one map entry: `(layer, neuron, total bits)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitwidthRecord {
    pub layer: usize,
    pub neuron: usize,
    pub bits: u32,
}

/// Per-neuron bitwidth assignment for every hidden neuron and every class neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitwidthMap {
    layers: Vec<Vec<BitwidthLevel>>,
}

impl BitwidthMap {
    /// `widths` lists the hidden layer sizes followed by the class count.
    pub fn uniform(widths: &[usize], level: BitwidthLevel) -> Self {
        Self {
            layers: widths.iter().map(|&w| vec![level; w]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<BitwidthLevel>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Vec<BitwidthLevel>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: NeuronId) -> BitwidthLevel {
        self.layers[id.layer][id.index]
    }

    pub fn set(&mut self, id: NeuronId, level: BitwidthLevel) {
        self.layers[id.layer][id.index] = level;
    }

    pub fn layer(&self, layer: usize) -> &[BitwidthLevel] {
        &self.layers[layer]
    }

    /// Every neuron id with its level, layer-major.
    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, BitwidthLevel)> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, levels)| {
            levels
                .iter()
                .enumerate()
                .map(move |(index, &level)| (NeuronId { layer, index }, level))
        })
    }

    pub fn to_records(&self) -> Vec<BitwidthRecord> {
        self.iter()
            .map(|(id, level)| BitwidthRecord {
                layer: id.layer,
                neuron: id.index,
                bits: level.bits(),
            })
            .collect()
    }

    /// Rebuilds a map from records; every `(layer, neuron)` in the rectangle must appear once.
    pub fn from_records(records: &[BitwidthRecord]) -> Result<Self> {
        let mut layers: Vec<Vec<Option<BitwidthLevel>>> = Vec::new();
        for r in records {
            if layers.len() <= r.layer {
                layers.resize(r.layer + 1, Vec::new());
            }
            let layer = &mut layers[r.layer];
            if layer.len() <= r.neuron {
                layer.resize(r.neuron + 1, None);
            }
            if layer[r.neuron].replace(BitwidthLevel::from_bits(r.bits)?).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "neuron ({}, {}) listed twice in bitwidth map",
                    r.layer, r.neuron
                )));
            }
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(li, layer)| {
                layer
                    .into_iter()
                    .enumerate()
                    .map(|(ni, l)| {
                        l.ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "neuron ({li}, {ni}) missing from bitwidth map"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Mean total bits over all mapped neurons; pruned neurons count as zero.
pub fn avg_bitwidth(map: &BitwidthMap) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::Empty("bitwidth map"));
    }
    let total: u64 = map.iter().map(|(_, l)| u64::from(l.bits())).sum();
    Ok(total as f64 / map.len() as f64)
}

fn quantize_columns(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    col_levels: &[BitwidthLevel],
) -> (Array2<f64>, Array1<f64>) {
    let mut w = weights.clone();
    for (mut col, &level) in w.columns_mut().into_iter().zip(col_levels) {
        col.mapv_inplace(|x| quantize_value(x, level));
    }
    let b = Array1::from_iter(
        bias.iter()
            .zip(col_levels)
            .map(|(&x, &level)| quantize_value(x, level)),
    );
    (w, b)
}

fn zero_pruned_rows(weights: &mut Array2<f64>, vis_bias: &mut Array1<f64>, row_levels: &[BitwidthLevel]) {
    for (i, &level) in row_levels.iter().enumerate() {
        match level {
            BitwidthLevel::Pruned => {
                weights.row_mut(i).fill(0.0);
                vis_bias[i] = 0.0;
            }
            _ => vis_bias[i] = quantize_value(vis_bias[i], level),
        }
    }
}

/// Quantizes one lower RBM. Hidden unit `j` owns weight column `j` and `b_hid[j]`.
/// `below` holds the levels of the layer feeding this RBM (`None` for raw pixels); rows
/// of pruned inputs are zeroed as their outgoing weights.
pub fn quantize_rbm(
    params: &RbmParams,
    hidden: &[BitwidthLevel],
    below: Option<&[BitwidthLevel]>,
) -> RbmParams {
    let (mut weights, hid_bias) = quantize_columns(&params.weights, &params.hid_bias, hidden);
    let mut vis_bias = params.vis_bias.clone();
    if let Some(below) = below {
        zero_pruned_rows(&mut weights, &mut vis_bias, below);
    }
    RbmParams {
        weights,
        vis_bias,
        hid_bias,
    }
}

/// Quantizes the top DRBM. Class neuron `c` owns row `c` of the class weights and
/// `b_cls[c]`; a pruned top hidden unit also loses its class-weight column.
pub fn quantize_drbm(
    params: &DrbmParams,
    hidden: &[BitwidthLevel],
    classes: &[BitwidthLevel],
    below: Option<&[BitwidthLevel]>,
) -> DrbmParams {
    let (mut weights, hid_bias) = quantize_columns(&params.weights, &params.hid_bias, hidden);
    let mut vis_bias = params.vis_bias.clone();
    if let Some(below) = below {
        zero_pruned_rows(&mut weights, &mut vis_bias, below);
    }
    let mut class_weights = params.class_weights.clone();
    let mut cls_bias = params.cls_bias.clone();
    for (c, &level) in classes.iter().enumerate() {
        class_weights
            .row_mut(c)
            .mapv_inplace(|x| quantize_value(x, level));
        cls_bias[c] = quantize_value(cls_bias[c], level);
    }
    for (j, &level) in hidden.iter().enumerate() {
        if level == BitwidthLevel::Pruned {
            class_weights.column_mut(j).fill(0.0);
        }
    }
    DrbmParams {
        weights,
        class_weights,
        vis_bias,
        hid_bias,
        cls_bias,
    }
}

/// Checks that `map` has one entry per hidden neuron and per class neuron of `model`.
pub fn check_map_shape(model: &DbnModel, map: &BitwidthMap) -> Result<()> {
    let expected = model.arch().map_widths();
    let actual = map.widths();
    if expected.len() != actual.len() {
        return Err(Error::dim("bitwidth map layers", expected.len(), actual.len()));
    }
    for (e, a) in expected.iter().zip(&actual) {
        if e != a {
            return Err(Error::dim("bitwidth map layer width", *e, *a));
        }
    }
    Ok(())
}

/// Returns a copy of `model` with every neuron's parameters quantized to its mapped level.
pub fn apply_bitwidth_map(model: &DbnModel, map: &BitwidthMap) -> Result<DbnModel> {
    check_map_shape(model, map)?;
    let lower_count = model.lower().len();
    let lower = model
        .lower()
        .iter()
        .enumerate()
        .map(|(k, rbm)| {
            let below = k.checked_sub(1).map(|b| map.layer(b));
            quantize_rbm(rbm, map.layer(k), below)
        })
        .collect();
    let below = lower_count.checked_sub(1).map(|b| map.layer(b));
    let top = quantize_drbm(
        model.top(),
        map.layer(lower_count),
        map.layer(lower_count + 1),
        below,
    );
    Ok(model.with_params(lower, top))
}
