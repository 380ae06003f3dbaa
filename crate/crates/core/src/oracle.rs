//! Self-check battery on tiny models: closed forms against exhaustive enumeration, analytic
//! gradients against finite differences, and the fixed-point worked examples.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::drbm::{disc_gradient, exact, DrbmParams};
use crate::error::Result;
use crate::fixed_point::FixedPointFormat;
use crate::math::{derive_seed, rng_from_seed, SeededRng};
use crate::rbm::{exact_gradient, exact_log_likelihood, RbmParams};

/// Relative tolerance for gradient comparisons; the absolute floor covers exact zeros.
pub const GRADIENT_RTOL: f64 = 1e-6;
pub const GRADIENT_ATOL: f64 = 1e-9;
pub const ENUMERATION_RTOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub cases: usize,
    /// Largest error observed, in the units the tolerance is stated in.
    pub worst: f64,
    pub passed: bool,
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`, reported as the ratio to the bound.
pub fn gradient_error_ratio(a: f64, b: f64) -> f64 {
    (a - b).abs() / (GRADIENT_RTOL * a.abs().max(b.abs()) + GRADIENT_ATOL)
}

fn uniform(rng: &mut SeededRng, scale: f64) -> f64 {
    scale * (2.0 * rng.random::<f64>() - 1.0)
}

fn random_drbm(rng: &mut SeededRng, v: usize, h: usize, c: usize) -> DrbmParams {
    let mut p = DrbmParams::zeros(v, h, c);
    p.weights.mapv_inplace(|_| uniform(rng, 1.0));
    p.class_weights.mapv_inplace(|_| uniform(rng, 1.0));
    p.vis_bias.mapv_inplace(|_| uniform(rng, 1.0));
    p.hid_bias.mapv_inplace(|_| uniform(rng, 1.0));
    p.cls_bias.mapv_inplace(|_| uniform(rng, 1.0));
    p
}

fn random_binary(rng: &mut SeededRng, n: usize, v: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, v), || f64::from(u8::from(rng.random_bool(0.5))))
}

fn outcome(name: &'static str, cases: usize, worst: f64, bound: f64) -> OracleOutcome {
    OracleOutcome {
        name,
        cases,
        worst,
        passed: worst <= bound,
    }
}

/// Runs every check on `cases` random models derived from `seed`.
pub fn run_oracles(seed: u64, cases: usize) -> Result<Vec<OracleOutcome>> {
    let mut rng = rng_from_seed(seed);
    let mut free = 0.0f64;
    let mut post = 0.0f64;
    for _ in 0..cases {
        let v = rng.random_range(1..=6);
        let h = rng.random_range(1..=8);
        let c = rng.random_range(2..=3);
        let p = random_drbm(&mut rng, v, h, c);
        let x = Array1::from_iter((0..v).map(|_| f64::from(u8::from(rng.random_bool(0.5)))));
        for k in 0..c {
            // free energy omits the class-independent visible-bias term
            let closed = -p.free_energy(x.view(), k)? + x.dot(&p.vis_bias);
            let enumerated = exact::log_marginal_xc(&p, x.view(), k)?;
            free = free.max((closed - enumerated).exp_m1().abs());
        }
        let a = p.class_posterior(x.view())?;
        let b = exact::posterior(&p, x.view())?;
        for (pa, pb) in a.iter().zip(&b) {
            post = post.max((pa - pb).abs() / pb.abs());
        }
    }

    let grad_cases = cases.min(10);
    let (mut disc, mut joint, mut marginal, mut rbm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..grad_cases {
        let mut r = rng_from_seed(derive_seed(seed, 1 + i as u64));
        let (v, h, c) = (r.random_range(2..=4), r.random_range(1..=4), r.random_range(2..=3));
        let p = random_drbm(&mut r, v, h, c);
        let x = random_binary(&mut r, 4, v);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..c)).collect();

        let fd = exact::finite_difference(&p, FD_STEP, &|q| exact::disc_nll(q, x.view(), &labels))?;
        let g = disc_gradient(&p, x.view(), &labels)?.flatten();
        disc = disc.max(worst_ratio(&g, &fd));

        let fd = exact::finite_difference(&p, FD_STEP, &|q| exact::joint_nll(q, x.view(), &labels))?;
        let g = exact::joint_nll_gradient(&p, x.view(), &labels)?.flatten();
        joint = joint.max(worst_ratio(&g, &fd));

        let fd = exact::finite_difference(&p, FD_STEP, &|q| exact::marginal_nll(q, x.view()))?;
        let g = exact::marginal_nll_gradient(&p, x.view())?.flatten();
        marginal = marginal.max(worst_ratio(&g, &fd));

        let mut q = RbmParams::zeros(v, h);
        q.weights.mapv_inplace(|_| uniform(&mut r, 1.0));
        q.vis_bias.mapv_inplace(|_| uniform(&mut r, 1.0));
        q.hid_bias.mapv_inplace(|_| uniform(&mut r, 1.0));
        let g = exact_gradient(&q, x.view())?.flatten();
        let mut probe = q.clone();
        let mut fd = Vec::with_capacity(q.num_params());
        for k in 0..q.num_params() {
            let orig = *probe.param_mut(k);
            *probe.param_mut(k) = orig + FD_STEP;
            let up = -exact_log_likelihood(&probe, x.view())?;
            *probe.param_mut(k) = orig - FD_STEP;
            let down = -exact_log_likelihood(&probe, x.view())?;
            *probe.param_mut(k) = orig;
            fd.push((up - down) / (2.0 * FD_STEP));
        }
        rbm = rbm.max(worst_ratio(&g, &fd));
    }

    let q22 = FixedPointFormat::new(2, 2)?;
    let worked = [(0.3, 0.25), (5.0, 1.75), (-3.0, -2.0), (0.375, 0.5)];
    let misses = worked.iter().filter(|(x, y)| q22.quantize(*x) != *y).count();

    Ok(vec![
        outcome("free energy vs hidden enumeration", cases, free, ENUMERATION_RTOL),
        outcome("class posterior vs (c, h) enumeration", cases, post, ENUMERATION_RTOL),
        outcome("discriminative gradient vs finite differences", grad_cases, disc, 1.0),
        outcome("joint likelihood gradient vs finite differences", grad_cases, joint, 1.0),
        outcome("marginal likelihood gradient vs finite differences", grad_cases, marginal, 1.0),
        outcome("rbm likelihood gradient vs finite differences", grad_cases, rbm, 1.0),
        outcome("Q(2.2) worked examples", worked.len(), misses as f64, 0.0),
    ])
}

fn worst_ratio(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| gradient_error_ratio(a, b))
        .fold(0.0, f64::max)
}
