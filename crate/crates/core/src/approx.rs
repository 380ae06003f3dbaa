//! Heterogeneous bitwidth search over a trained DBN.
//!
//! The search starts from the lowest uniform level that stays within tolerance, then
//! repeatedly lowers the least critical neurons by one level, retrains with quantization in
//! the forward pass, and keeps the change only if accuracy stays within tolerance. Neurons
//! whose change is rejected are frozen at their current level.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dbn::{accuracy, cross_entropy, metrics_from_free_energies, DbnModel};
use crate::drbm::{train_drbm_with, Objective, SslConfig};
use crate::error::{Error, Result};
use crate::fixed_point::{
    apply_bitwidth_map, avg_bitwidth, check_map_shape, quantize_drbm, quantize_rbm, quantize_value,
    BitwidthLevel, BitwidthMap, NeuronId,
};
use crate::math::{derive_seed, sigmoid, softplus};
use crate::rbm::{train_rbm_with, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxConfig {
    /// Largest allowed accuracy drop below full precision, in absolute fraction
    /// (0.05 means five percentage points).
    pub tolerance: f64,
    /// Strictly ascending; the largest entry is where uniform reduction starts.
    pub levels: Vec<BitwidthLevel>,
    /// Fraction of eligible neurons lowered per iteration, rounded up.
    pub prune_fraction: f64,
    pub retrain: TrainConfig,
    /// Retrain the lower RBMs as well as the top DRBM.
    pub retrain_lower: bool,
    pub max_iterations: usize,
    /// Objective used by the top-layer retraining; should match the one the model was
    /// trained with.
    pub objective: Objective,
    pub ssl: Option<SslConfig>,
}

impl Default for AxConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.05,
            levels: BitwidthLevel::ALL.to_vec(),
            prune_fraction: 0.10,
            retrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            retrain_lower: true,
            max_iterations: 1_000,
            objective: Objective::Generative,
            ssl: None,
        }
    }
}

impl AxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("levels must be strictly ascending".into()));
        }
        if !self.levels.iter().any(|&l| l != BitwidthLevel::Pruned) {
            return Err(Error::InvalidArgument("levels need at least one nonzero entry".into()));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction <= 1.0) {
            return Err(Error::InvalidArgument("prune_fraction must lie in (0, 1]".into()));
        }
        self.retrain.validate()
    }

    pub fn max_level(&self) -> BitwidthLevel {
        *self.levels.last().expect("validated levels are nonempty")
    }

    /// Largest configured level strictly below `current`.
    pub fn next_lower(&self, current: BitwidthLevel) -> Option<BitwidthLevel> {
        next_lower(&self.levels, current)
    }
}

fn next_lower(levels: &[BitwidthLevel], current: BitwidthLevel) -> Option<BitwidthLevel> {
    levels.iter().rev().copied().find(|&l| l < current)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformReduction {
    pub level: BitwidthLevel,
    pub map: BitwidthMap,
    /// Accuracy of the model quantized uniformly at `level`.
    pub accuracy: f64,
    pub fp_accuracy: f64,
    /// False when even the largest level violates the tolerance.
    pub meets_tolerance: bool,
}

/// Descends the nonzero levels from the largest, quantizing every neuron uniformly without
/// retraining, and stops at the first violation.
pub fn uniform_reduce(model: &DbnModel, eval: &Dataset, config: &AxConfig) -> Result<UniformReduction> {
    config.validate()?;
    require_eval(eval)?;
    let fp_accuracy = accuracy(model, eval)?;
    let floor = fp_accuracy - config.tolerance;
    let widths = model.arch().map_widths();
    let mut best: Option<(BitwidthLevel, f64)> = None;
    let mut top_accuracy = None;
    for &level in config.levels.iter().rev().filter(|&&l| l != BitwidthLevel::Pruned) {
        let map = BitwidthMap::uniform(&widths, level);
        let acc = accuracy(&apply_bitwidth_map(model, &map)?, eval)?;
        top_accuracy.get_or_insert(acc);
        if acc < floor {
            break;
        }
        best = Some((level, acc));
    }
    let (level, acc, meets_tolerance) = match best {
        Some((level, acc)) => (level, acc, true),
        None => (config.max_level(), top_accuracy.expect("at least one nonzero level"), false),
    };
    Ok(UniformReduction {
        level,
        map: BitwidthMap::uniform(&widths, level),
        accuracy: acc,
        fp_accuracy,
        meets_tolerance,
    })
}

/// One entry of a criticality ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criticality {
    pub neuron: NeuronId,
    /// Next-lower level the neuron was probed at.
    pub target: BitwidthLevel,
    /// Increase in evaluation cross-entropy when only this neuron is lowered.
    pub delta: f64,
}

/// Neurons that have a lower configured level and are not in `frozen`, in id order.
pub fn eligible_neurons(
    map: &BitwidthMap,
    levels: &[BitwidthLevel],
    frozen: &BTreeSet<NeuronId>,
) -> Vec<(NeuronId, BitwidthLevel)> {
    map.iter()
        .filter(|(id, _)| !frozen.contains(id))
        .filter_map(|(id, level)| next_lower(levels, level).map(|t| (id, t)))
        .collect()
}

fn sort_ranking(ranking: &mut [Criticality]) {
    ranking.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.neuron.cmp(&b.neuron)));
}

/// Ranks eligible neurons least critical first. `model` holds the unquantized parameters;
/// `map` is the current assignment.
///
/// Each probe reuses cached activations of the quantized base model and recomputes only what
/// the probed neuron influences. Probes run in parallel; the result order is deterministic.
pub fn criticality_rank(
    model: &DbnModel,
    map: &BitwidthMap,
    eval: &Dataset,
    levels: &[BitwidthLevel],
    frozen: &BTreeSet<NeuronId>,
) -> Result<Vec<Criticality>> {
    let candidates = eligible_neurons(map, levels, frozen);
    if candidates.is_empty() {
        return Err(Error::Empty("eligible neurons"));
    }
    let base = ProbeBase::new(model, map, eval)?;
    let mut ranking: Vec<Criticality> = candidates
        .par_iter()
        .map(|&(neuron, target)| Criticality {
            neuron,
            target,
            delta: base.delta(neuron, target),
        })
        .collect();
    sort_ranking(&mut ranking);
    Ok(ranking)
}

/// Slow reference for [`criticality_rank`]: requantizes and re-evaluates the whole model for
/// every probe.
pub fn criticality_rank_reference(
    model: &DbnModel,
    map: &BitwidthMap,
    eval: &Dataset,
    levels: &[BitwidthLevel],
    frozen: &BTreeSet<NeuronId>,
) -> Result<Vec<Criticality>> {
    let candidates = eligible_neurons(map, levels, frozen);
    if candidates.is_empty() {
        return Err(Error::Empty("eligible neurons"));
    }
    require_eval(eval)?;
    let base = cross_entropy(&apply_bitwidth_map(model, map)?, eval)?;
    let mut ranking = Vec::with_capacity(candidates.len());
    for (neuron, target) in candidates {
        let mut probe = map.clone();
        probe.set(neuron, target);
        let ce = cross_entropy(&apply_bitwidth_map(model, &probe)?, eval)?;
        ranking.push(Criticality {
            neuron,
            target,
            delta: ce - base,
        });
    }
    sort_ranking(&mut ranking);
    Ok(ranking)
}

/// Cached forward pass of the quantized base model.
struct ProbeBase<'a> {
    shadow: &'a DbnModel,
    quant: DbnModel,
    map: &'a BitwidthMap,
    labels: &'a [usize],
    /// `acts[k]` is the input of lower RBM `k`; the last entry is the top DRBM input.
    acts: Vec<Array2<f64>>,
    /// `pres[k]` is the preactivation of hidden layer `k`; the last entry is the top's.
    pres: Vec<Array2<f64>>,
    free: Array2<f64>,
    base_ce: f64,
}

impl<'a> ProbeBase<'a> {
    fn new(shadow: &'a DbnModel, map: &'a BitwidthMap, eval: &'a Dataset) -> Result<Self> {
        let labels = require_eval(eval)?;
        let quant = apply_bitwidth_map(shadow, map)?;
        if eval.dim() != quant.arch().visible_size {
            return Err(Error::dim("eval image width", quant.arch().visible_size, eval.dim()));
        }
        let mut acts = vec![eval.images().clone()];
        let mut pres = Vec::with_capacity(quant.lower().len() + 1);
        for rbm in quant.lower() {
            let mut pre = acts.last().expect("nonempty").dot(&rbm.weights);
            pre += &rbm.hid_bias;
            acts.push(pre.mapv(sigmoid));
            pres.push(pre);
        }
        let top_pre = quant.top().hidden_preactivation(acts.last().expect("nonempty").view())?;
        let free = quant.top().free_energies_from_pre(&top_pre);
        pres.push(top_pre);
        let base_ce = metrics_from_free_energies(&free, labels).1;
        Ok(Self {
            shadow,
            quant,
            map,
            labels,
            acts,
            pres,
            free,
            base_ce,
        })
    }

    fn below(&self, layer: usize) -> Option<&[BitwidthLevel]> {
        layer.checked_sub(1).map(|b| self.map.layer(b))
    }

    fn delta(&self, id: NeuronId, target: BitwidthLevel) -> f64 {
        let lower = self.quant.lower().len();
        let free = if id.layer == lower + 1 {
            self.probe_class(id.index, target)
        } else if id.layer == lower {
            self.probe_top_hidden(id.index, target)
        } else {
            self.probe_lower_hidden(id.layer, id.index, target)
        };
        match free {
            Some(free) => metrics_from_free_energies(&free, self.labels).1 - self.base_ce,
            None => 0.0,
        }
    }

    /// Requantized incoming column and bias of hidden unit `j`, with pruned inputs zeroed.
    fn requantize_column(
        weights: &Array2<f64>,
        bias: &Array1<f64>,
        j: usize,
        level: BitwidthLevel,
        below: Option<&[BitwidthLevel]>,
    ) -> (Array1<f64>, f64) {
        let mut col = weights.column(j).mapv(|x| quantize_value(x, level));
        if let Some(below) = below {
            for (c, &l) in col.iter_mut().zip(below) {
                if l == BitwidthLevel::Pruned {
                    *c = 0.0;
                }
            }
        }
        (col, quantize_value(bias[j], level))
    }

    /// `None` when the probe leaves the quantized model unchanged.
    fn probe_lower_hidden(&self, k: usize, j: usize, target: BitwidthLevel) -> Option<Array2<f64>> {
        let lower = self.quant.lower().len();
        let src = &self.shadow.lower()[k];
        let cur = &self.quant.lower()[k];
        let (col, bias) = Self::requantize_column(&src.weights, &src.hid_bias, j, target, self.below(k));
        let pruned = target == BitwidthLevel::Pruned;
        if !pruned && col == cur.weights.column(j) && bias == cur.hid_bias[j] {
            return None;
        }
        // A pruned unit's outgoing row is zero, which removes its contribution entirely.
        let new_act = if pruned {
            Array1::zeros(self.labels.len())
        } else {
            (self.acts[k].dot(&col) + bias).mapv(sigmoid)
        };
        let diff = new_act - self.acts[k + 1].column(j);
        let next_row = if k + 1 < lower {
            self.quant.lower()[k + 1].weights.row(j)
        } else {
            self.quant.top().weights.row(j)
        };
        let outer = diff.insert_axis(Axis(1)).dot(&next_row.insert_axis(Axis(0)));
        let mut pre = &self.pres[k + 1] + &outer;
        for m in (k + 1)..lower {
            let act = pre.mapv(sigmoid);
            pre = if m + 1 < lower {
                let rbm = &self.quant.lower()[m + 1];
                act.dot(&rbm.weights) + &rbm.hid_bias
            } else {
                act.dot(&self.quant.top().weights) + &self.quant.top().hid_bias
            };
        }
        Some(self.quant.top().free_energies_from_pre(&pre))
    }

    fn probe_top_hidden(&self, j: usize, target: BitwidthLevel) -> Option<Array2<f64>> {
        let lower = self.quant.lower().len();
        let src = self.shadow.top();
        let cur = self.quant.top();
        let (col, bias) = Self::requantize_column(&src.weights, &src.hid_bias, j, target, self.below(lower));
        let pruned = target == BitwidthLevel::Pruned;
        if !pruned && col == cur.weights.column(j) && bias == cur.hid_bias[j] {
            return None;
        }
        let new_pre = if pruned {
            Array1::zeros(self.labels.len())
        } else {
            self.acts[lower].dot(&col) + bias
        };
        let old_pre = self.pres[lower].column(j);
        let old_wc = cur.class_weights.column(j);
        let mut free = self.free.clone();
        for (n, mut row) in free.rows_mut().into_iter().enumerate() {
            for (c, f) in row.iter_mut().enumerate() {
                let new_wc = if pruned { 0.0 } else { old_wc[c] };
                *f += softplus(old_pre[n] + old_wc[c]) - softplus(new_pre[n] + new_wc);
            }
        }
        Some(free)
    }

    fn probe_class(&self, c: usize, target: BitwidthLevel) -> Option<Array2<f64>> {
        let lower = self.quant.lower().len();
        let src = self.shadow.top();
        let cur = self.quant.top();
        let mut row = src.class_weights.row(c).mapv(|x| quantize_value(x, target));
        for (w, &l) in row.iter_mut().zip(self.map.layer(lower)) {
            if l == BitwidthLevel::Pruned {
                *w = 0.0;
            }
        }
        let bias = quantize_value(src.cls_bias[c], target);
        if row == cur.class_weights.row(c) && bias == cur.cls_bias[c] {
            return None;
        }
        let mut free = self.free.clone();
        for (p, f) in self.pres[lower].rows().into_iter().zip(free.column_mut(c)) {
            let total: f64 = p.iter().zip(&row).map(|(&pj, &wj)| softplus(pj + wj)).sum();
            *f = -bias - total;
        }
        Some(free)
    }
}

fn require_eval(eval: &Dataset) -> Result<&[usize]> {
    let labels = eval.require_labels()?;
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(labels)
}

/// Zeroes every parameter owned by or leaving a pruned neuron. Other parameters are kept at
/// full precision.
pub fn mask_pruned(model: &mut DbnModel, map: &BitwidthMap) -> Result<()> {
    check_map_shape(model, map)?;
    let lower = model.lower().len();
    for k in 0..=lower {
        for (j, &level) in map.layer(k).iter().enumerate() {
            if level != BitwidthLevel::Pruned {
                continue;
            }
            if k < lower {
                let rbm = &mut model.lower_mut()[k];
                rbm.weights.column_mut(j).fill(0.0);
                rbm.hid_bias[j] = 0.0;
                if k + 1 < lower {
                    let next = &mut model.lower_mut()[k + 1];
                    next.weights.row_mut(j).fill(0.0);
                    next.vis_bias[j] = 0.0;
                } else {
                    let top = model.top_mut();
                    top.weights.row_mut(j).fill(0.0);
                    top.vis_bias[j] = 0.0;
                }
            } else {
                let top = model.top_mut();
                top.weights.column_mut(j).fill(0.0);
                top.hid_bias[j] = 0.0;
                top.class_weights.column_mut(j).fill(0.0);
            }
        }
    }
    let top = model.top_mut();
    for (c, &level) in map.layer(lower + 1).iter().enumerate() {
        if level == BitwidthLevel::Pruned {
            top.class_weights.row_mut(c).fill(0.0);
            top.cls_bias[c] = 0.0;
        }
    }
    Ok(())
}

/// Quantization-aware retraining: gradients are taken at the quantized parameters and applied
/// to the full-precision shadow copy.
pub fn retrain_quantized(
    shadow: &DbnModel,
    map: &BitwidthMap,
    labeled: &Dataset,
    unlabeled: &Dataset,
    config: &AxConfig,
    seed: u64,
) -> Result<DbnModel> {
    let mut out = shadow.clone();
    mask_pruned(&mut out, map)?;
    if config.retrain.epochs == 0 {
        return Ok(out);
    }
    let labels = labeled.require_labels()?;
    let lower = out.lower().len();
    if config.retrain_lower && lower > 0 {
        let mut input = labeled.concat_images(unlabeled)?;
        for k in 0..lower {
            let hidden = map.layer(k);
            let below = k.checked_sub(1).map(|b| map.layer(b));
            let cfg = TrainConfig {
                seed: derive_seed(seed, k as u64),
                ..config.retrain.clone()
            };
            let forward = |p: &_| quantize_rbm(p, hidden, below);
            let trained = train_rbm_with(&out.lower()[k], input.view(), &cfg, &forward)?;
            out.lower_mut()[k] = trained;
            mask_pruned(&mut out, map)?;
            input = quantize_rbm(&out.lower()[k], hidden, below).hidden_probs(input.view())?;
        }
    }
    let quant = apply_bitwidth_map(&out, map)?;
    let x = quant.propagate_batch(labeled.images().view())?;
    let use_unlabeled = config.ssl.is_some() && !unlabeled.is_empty();
    let u = if use_unlabeled {
        quant.propagate_batch(unlabeled.images().view())?
    } else {
        Array2::zeros((0, x.ncols()))
    };
    let hidden = map.layer(lower);
    let classes = map.layer(lower + 1);
    let below = lower.checked_sub(1).map(|b| map.layer(b));
    let cfg = TrainConfig {
        seed: derive_seed(seed, 1_000),
        ..config.retrain.clone()
    };
    let forward = |p: &_| quantize_drbm(p, hidden, classes, below);
    let top = train_drbm_with(
        out.top(),
        x.view(),
        labels,
        u.view(),
        config.objective,
        config.ssl.as_ref(),
        &cfg,
        &forward,
    )?;
    *out.top_mut() = top;
    mask_pruned(&mut out, map)?;
    Ok(out)
}

/// One step of the search. Iteration 0 is the uniform reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub accuracy: f64,
    pub avg_bitwidth: f64,
    /// Neurons lowered in this step (every neuron for the uniform step).
    pub neurons_lowered: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxResult {
    pub map: BitwidthMap,
    /// Final quantized model with `map` attached.
    pub model: DbnModel,
    /// Full-precision shadow parameters of the final state.
    pub shadow: DbnModel,
    pub br_accuracy: f64,
    pub fp_accuracy: f64,
    pub avg_bitwidth: f64,
    pub start_level: BitwidthLevel,
    pub history: Vec<IterationRecord>,
    pub tolerance_met: bool,
}

/// Runs the full search. `eval` decides acceptance; `labeled` (and `unlabeled` when
/// `config.ssl` is set) drive retraining.
pub fn ax_dbn(
    model: &DbnModel,
    labeled: &Dataset,
    unlabeled: &Dataset,
    eval: &Dataset,
    config: &AxConfig,
) -> Result<ApproxResult> {
    config.validate()?;
    if labeled.require_labels()?.is_empty() {
        return Err(Error::Empty("labeled training set"));
    }
    let uniform = uniform_reduce(model, eval, config)?;
    let fp_accuracy = uniform.fp_accuracy;
    let floor = fp_accuracy - config.tolerance;

    let mut shadow = model.clone();
    shadow.set_bitwidths(None);
    let mut map = uniform.map.clone();
    let mut br_accuracy = uniform.accuracy;
    let mut tolerance_met = uniform.meets_tolerance;
    let mut history = vec![IterationRecord {
        iteration: 0,
        accuracy: uniform.accuracy,
        avg_bitwidth: avg_bitwidth(&map)?,
        neurons_lowered: map.len(),
        accepted: uniform.meets_tolerance,
    }];
    let mut frozen = BTreeSet::new();

    for iteration in 1..=config.max_iterations {
        if eligible_neurons(&map, &config.levels, &frozen).is_empty() {
            break;
        }
        let ranking = criticality_rank(&shadow, &map, eval, &config.levels, &frozen)?;
        let count = ((config.prune_fraction * ranking.len() as f64).ceil() as usize).clamp(1, ranking.len());
        let chosen = &ranking[..count];
        let mut candidate_map = map.clone();
        for c in chosen {
            candidate_map.set(c.neuron, c.target);
        }
        let seed = derive_seed(config.retrain.seed, iteration as u64);
        let candidate = retrain_quantized(&shadow, &candidate_map, labeled, unlabeled, config, seed)?;
        let acc = accuracy(&apply_bitwidth_map(&candidate, &candidate_map)?, eval)?;
        let accepted = acc >= floor;
        history.push(IterationRecord {
            iteration,
            accuracy: acc,
            avg_bitwidth: avg_bitwidth(&candidate_map)?,
            neurons_lowered: count,
            accepted,
        });
        log::debug!(
            "iteration {iteration}: lowered {count}, accuracy {acc:.4}, {}",
            if accepted { "accepted" } else { "reverted" }
        );
        if accepted {
            assert!(acc >= floor, "accepted state below tolerance floor");
            shadow = candidate;
            map = candidate_map;
            br_accuracy = acc;
            tolerance_met = true;
        } else {
            frozen.extend(chosen.iter().map(|c| c.neuron));
        }
    }

    let mut quant = apply_bitwidth_map(&shadow, &map)?;
    quant.set_bitwidths(Some(map.clone()));
    Ok(ApproxResult {
        avg_bitwidth: avg_bitwidth(&map)?,
        map,
        model: quant,
        shadow,
        br_accuracy,
        fp_accuracy,
        start_level: uniform.level,
        history,
        tolerance_met,
    })
}
