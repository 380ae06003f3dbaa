//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! The MNIST criteria read the four standard IDX files from `AXDBN_MNIST_DIR`, falling back
//! to `data/mnist` at the workspace root. Without the files they fail with the reason.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axdbn::approx::{ax_dbn, ApproxResult, AxConfig};
use axdbn::data::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels, Dataset, IdxImages};
use axdbn::dbn::{accuracy, train_greedy, Architecture, DbnModel, DbnTrainConfig};
use axdbn::drbm::{disc_gradient, exact, DrbmParams, Objective};
use axdbn::fixed_point::{quantize_value, BitwidthLevel, FixedPointFormat};
use axdbn::harness::{
    approximate_run, evaluate_run, prepare_run, read_runs_csv, run_beta, run_experiment, train_run, DataPaths,
    ExperimentConfig, ExperimentData, Mode, NoisyAccuracy, RUNS_CSV, SUMMARY_JSON,
};
use axdbn::rbm::TrainConfig;
use ndarray::{Array1, Array2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

type Outcome = Result<String, String>;

const ENUMERATION_RTOL: f64 = 1e-10;
const GRADIENT_RTOL: f64 = 1e-6;
// FD noise on coordinates whose true value is exactly zero
const GRADIENT_ATOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const MNIST_SEEDS: usize = 5;
const MNIST_TOLERANCE: f64 = 0.05;
const NOISE_SLACK: f64 = 0.01;

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    if elapsed < limit {
        Ok(format!("{detail}, {elapsed:.2?}"))
    } else {
        Err(format!("{detail}, but took {elapsed:.2?} (limit {limit:?})"))
    }
}

// ---------------------------------------------------------------------------------------
// Independent enumeration of the DRBM Boltzmann distribution.

fn neg_energy(p: &DrbmParams, x: &[f64], c: usize, h: &[f64]) -> f64 {
    let mut e = p.cls_bias[c];
    for (i, &xi) in x.iter().enumerate() {
        e += xi * p.vis_bias[i];
        for (j, &hj) in h.iter().enumerate() {
            e += xi * p.weights[[i, j]] * hj;
        }
    }
    for (j, &hj) in h.iter().enumerate() {
        e += hj * (p.hid_bias[j] + p.class_weights[[c, j]]);
    }
    e
}

fn binary(n: usize) -> Vec<Vec<f64>> {
    (0..1usize << n)
        .map(|m| (0..n).map(|b| ((m >> b) & 1) as f64).collect())
        .collect()
}

fn lse(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log sum_h exp(-E(x, c, h))`.
fn log_hidden_sum(p: &DrbmParams, x: &[f64], c: usize) -> f64 {
    let terms: Vec<f64> = binary(p.hid_bias.len()).iter().map(|h| neg_energy(p, x, c, h)).collect();
    lse(&terms)
}

fn log_z(p: &DrbmParams) -> f64 {
    let mut terms = Vec::new();
    for x in binary(p.vis_bias.len()) {
        for c in 0..p.cls_bias.len() {
            terms.push(log_hidden_sum(p, &x, c));
        }
    }
    lse(&terms)
}

fn disc_loss(p: &DrbmParams, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let per: Vec<f64> = (0..p.cls_bias.len()).map(|c| log_hidden_sum(p, x, c)).collect();
        total -= per[y] - lse(&per);
    }
    total / ys.len() as f64
}

fn joint_loss(p: &DrbmParams, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let z = log_z(p);
    xs.iter().zip(ys).map(|(x, &y)| z - log_hidden_sum(p, x, y)).sum::<f64>() / ys.len() as f64
}

fn marginal_loss(p: &DrbmParams, xs: &[Vec<f64>]) -> f64 {
    let z = log_z(p);
    xs.iter()
        .map(|x| {
            let per: Vec<f64> = (0..p.cls_bias.len()).map(|c| log_hidden_sum(p, x, c)).collect();
            z - lse(&per)
        })
        .sum::<f64>()
        / xs.len() as f64
}

fn fields(p: &DrbmParams) -> Vec<f64> {
    p.weights
        .iter()
        .chain(p.class_weights.iter())
        .chain(p.vis_bias.iter())
        .chain(p.hid_bias.iter())
        .chain(p.cls_bias.iter())
        .copied()
        .collect()
}

fn fields_mut(p: &mut DrbmParams) -> Vec<&mut f64> {
    p.weights
        .iter_mut()
        .chain(p.class_weights.iter_mut())
        .chain(p.vis_bias.iter_mut())
        .chain(p.hid_bias.iter_mut())
        .chain(p.cls_bias.iter_mut())
        .collect()
}

fn central_difference(p: &DrbmParams, loss: &dyn Fn(&DrbmParams) -> f64) -> Vec<f64> {
    let n = fields(p).len();
    (0..n)
        .map(|k| {
            let mut up = p.clone();
            *fields_mut(&mut up).swap_remove(k) += FD_STEP;
            let mut down = p.clone();
            *fields_mut(&mut down).swap_remove(k) -= FD_STEP;
            (loss(&up) - loss(&down)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst `|a - b| / (rtol * max(|a|, |b|) + atol)`; at most 1 passes.
fn gradient_ratio(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / (GRADIENT_RTOL * a.abs().max(b.abs()) + GRADIENT_ATOL))
        .fold(0.0, f64::max)
}

fn random_drbm(rng: &mut StdRng, v: usize, h: usize, c: usize) -> DrbmParams {
    let mut p = DrbmParams::zeros(v, h, c);
    for w in fields_mut(&mut p) {
        *w = rng.random_range(-1.5..1.5);
    }
    p
}

// ---------------------------------------------------------------------------------------

fn free_energy_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xF00D);
    let (mut worst_free, mut worst_post, mut checks) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..50 {
        let v = rng.random_range(1..=6);
        let h = rng.random_range(1..=8);
        let c = rng.random_range(2..=3);
        let p = random_drbm(&mut rng, v, h, c);
        let mut inputs = binary(v);
        inputs.push((0..v).map(|_| rng.random::<f64>()).collect());
        for x in &inputs {
            let xv = Array1::from(x.clone());
            let mut per_class = Vec::with_capacity(c);
            for k in 0..c {
                let enumerated = log_hidden_sum(&p, x, k);
                per_class.push(enumerated);
                // the class-independent factor exp(b_vis . x) is kept out of the free energy
                let closed = -p.free_energy(xv.view(), k).map_err(|e| e.to_string())? + xv.dot(&p.vis_bias);
                worst_free = worst_free.max((closed - enumerated).exp_m1().abs());
                checks += 1;
            }
            let norm = lse(&per_class);
            let post = p.class_posterior(xv.view()).map_err(|e| e.to_string())?;
            for k in 0..c {
                let want = (per_class[k] - norm).exp();
                worst_post = worst_post.max((post[k] - want).abs() / want);
            }
        }
    }
    let detail = format!("{checks} (x, c) pairs on 50 models, worst free-energy rel err {worst_free:.1e}, worst posterior rel err {worst_post:.1e}");
    if worst_free > ENUMERATION_RTOL || worst_post > ENUMERATION_RTOL {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(5), detail)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x6EAD);
    let (mut disc, mut joint, mut marginal) = (0.0f64, 0.0f64, 0.0f64);
    let models = 10;
    for _ in 0..models {
        let v = rng.random_range(2..=4);
        let h = rng.random_range(1..=4);
        let c = rng.random_range(2..=3);
        let p = random_drbm(&mut rng, v, h, c);
        let n = 5;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..v).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect())
            .collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let batch = Array2::from_shape_fn((n, v), |(i, j)| xs[i][j]);

        let g = disc_gradient(&p, batch.view(), &ys).map_err(|e| e.to_string())?;
        disc = disc.max(gradient_ratio(&fields(&g), &central_difference(&p, &|q| disc_loss(q, &xs, &ys))));

        let g = exact::joint_nll_gradient(&p, batch.view(), &ys).map_err(|e| e.to_string())?;
        joint = joint.max(gradient_ratio(&fields(&g), &central_difference(&p, &|q| joint_loss(q, &xs, &ys))));

        let g = exact::marginal_nll_gradient(&p, batch.view()).map_err(|e| e.to_string())?;
        marginal = marginal.max(gradient_ratio(&fields(&g), &central_difference(&p, &|q| marginal_loss(q, &xs))));
    }
    let detail = format!(
        "{models} models, worst error / (1e-6 rel + 1e-9 abs): disc {disc:.2}, joint {joint:.2}, marginal {marginal:.2}"
    );
    if disc.max(joint).max(marginal) > 1.0 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(30), detail)
}

fn quantizer_properties() -> Outcome {
    let start = Instant::now();
    // (total bits, integer bits, fractional bits) of the search space
    let table = [(4, 2, 2), (8, 2, 6), (12, 6, 6), (16, 8, 8), (32, 8, 24), (64, 8, 56)];
    for &(bits, m, n) in &table {
        let f = BitwidthLevel::from_bits(bits).map_err(|e| e.to_string())?.format().ok_or("pruned format")?;
        if (f.int_bits(), f.frac_bits()) != (m, n) {
            return Err(format!("{bits}-bit level is {f}, expected Q({m}.{n})"));
        }
    }
    let q22 = FixedPointFormat::new(2, 2).map_err(|e| e.to_string())?;
    for (x, want) in [(0.3, 0.25), (5.0, 1.75), (-3.0, -2.0), (0.375, 0.5)] {
        let got = q22.quantize(x);
        if got.to_bits() != f64::to_bits(want) {
            return Err(format!("Q(2.2) of {x} is {got}, expected {want}"));
        }
    }

    let mut rng = StdRng::seed_from_u64(0x0BAD_5EED);
    let pairs = 100_000;
    for i in 0..pairs {
        let (bits, m, n) = table[i % table.len()];
        let level = BitwidthLevel::from_bits(bits).map_err(|e| e.to_string())?;
        let step = (-(n as f64)).exp2();
        let lo = -((m - 1) as f64).exp2();
        let hi = ((m - 1) as f64).exp2() - step;
        let draw = |rng: &mut StdRng| match rng.random_range(0..4) {
            0 => rng.random_range(lo..=hi),
            1 => rng.random_range(-1e3..1e3),
            // exact midpoints between codes
            2 => (rng.random_range(-(1i64 << (m + n - 1).min(40))..(1i64 << (m + n - 1).min(40))) as f64 + 0.5) * step,
            _ => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..4)),
        };
        let (x, y) = (draw(&mut rng), draw(&mut rng));
        let (qx, qy) = (quantize_value(x, level), quantize_value(y, level));
        let fail = |what: &str| Err(format!("{what} for x = {x:e}, y = {y:e} at {bits} bits"));
        if quantize_value(qx, level).to_bits() != qx.to_bits() {
            return fail("not idempotent");
        }
        if !(lo..=hi).contains(&qx) {
            return fail("out of range");
        }
        let code = qx * (n as f64).exp2();
        if code != code.trunc() {
            return fail("off grid");
        }
        if (x <= y && qx > qy) || (y <= x && qy > qx) {
            return fail("not monotone");
        }
        if (lo..=hi).contains(&x) && (qx - x).abs() > step / 2.0 {
            return fail("not nearest");
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!("{pairs} random pairs over six formats and four Q(2.2) examples bit-exact"),
    )
}

// ---------------------------------------------------------------------------------------
// Synthetic digits: noisy copies of fixed random prototypes.

fn prototype_images(n: usize, dim: usize, classes: usize, flip: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut proto_rng = StdRng::seed_from_u64(7);
    let protos: Vec<Vec<bool>> = (0..classes)
        .map(|_| (0..dim).map(|_| proto_rng.random_bool(0.4)).collect())
        .collect();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, dim));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &c) in labels.iter().enumerate() {
        for d in 0..dim {
            if protos[c][d] != rng.random_bool(flip) {
                x[[i, d]] = 1.0;
            }
        }
    }
    (x, labels)
}

fn synthetic(n: usize, seed: u64) -> Dataset {
    let (x, y) = prototype_images(n, 36, 10, 0.12, seed);
    Dataset::new(x, Some(y), 10).expect("synthetic dataset")
}

/// Invariants every search result must satisfy against its eval set and input model.
fn check_contract(ax: &ApproxResult, fp: &DbnModel, eval: &Dataset, tolerance: f64) -> Result<(), String> {
    let fp_acc = accuracy(fp, eval).map_err(|e| e.to_string())?;
    let br_acc = accuracy(&ax.model, eval).map_err(|e| e.to_string())?;
    if fp_acc != ax.fp_accuracy || br_acc != ax.br_accuracy {
        return Err(format!(
            "reported accuracies {}/{} differ from recomputed {fp_acc}/{br_acc}",
            ax.fp_accuracy, ax.br_accuracy
        ));
    }
    if ax.tolerance_met && br_acc < fp_acc - tolerance {
        return Err(format!("accepted output at {br_acc} below floor {}", fp_acc - tolerance));
    }
    if let Some((id, level)) = ax.map.iter().find(|(_, l)| *l > ax.start_level) {
        return Err(format!("neuron {id:?} at {} bits above start {}", level.bits(), ax.start_level.bits()));
    }
    if ax.avg_bitwidth > f64::from(ax.start_level.bits()) {
        return Err(format!("avg bitwidth {} above start {}", ax.avg_bitwidth, ax.start_level.bits()));
    }
    Ok(())
}

fn ax_contract() -> Outcome {
    let start = Instant::now();
    let train = synthetic(600, 1);
    let eval = synthetic(200, 2);
    let arch = Architecture::new(36, vec![16, 12], 10).map_err(|e| e.to_string())?;
    let restricted = BitwidthLevel::parse_list("0,4,8").map_err(|e| e.to_string())?;
    let mut cases = Vec::new();
    for objective in [Objective::Generative, Objective::Discriminative] {
        for seed in 0..2u64 {
            for tolerance in [0.01, 0.05] {
                for levels in [BitwidthLevel::ALL.to_vec(), restricted.clone()] {
                    cases.push((objective, seed, tolerance, levels));
                }
            }
        }
    }
    let empty = train.select(&[]).without_labels();
    let results: Vec<Result<(bool, usize), String>> = cases
        .par_iter()
        .map(|(objective, seed, tolerance, levels)| {
            let cfg = DbnTrainConfig {
                pretrain: TrainConfig { epochs: 5, ..TrainConfig::default() },
                top: TrainConfig { epochs: 30, ..TrainConfig::default() },
                objective: *objective,
                ssl: None,
                seed: *seed,
            };
            let fp = train_greedy(&arch, &train, &empty, &cfg).map_err(|e| e.to_string())?;
            let ax_cfg = AxConfig {
                tolerance: *tolerance,
                levels: levels.clone(),
                objective: *objective,
                retrain: TrainConfig { seed: 100 + seed, epochs: 1, ..TrainConfig::default() },
                ..AxConfig::default()
            };
            let full = ax_dbn(&fp, &train, &empty, &eval, &ax_cfg).map_err(|e| e.to_string())?;
            check_contract(&full, &fp, &eval, *tolerance)?;
            // the search is deterministic, so capping the iteration count replays a prefix
            let iterations = full.history.len() - 1;
            let mut previous: Option<axdbn::fixed_point::BitwidthMap> = None;
            for k in 0..=iterations {
                let prefix = ax_dbn(&fp, &train, &empty, &eval, &AxConfig { max_iterations: k, ..ax_cfg.clone() })
                    .map_err(|e| e.to_string())?;
                check_contract(&prefix, &fp, &eval, *tolerance)?;
                if let Some(prev) = &previous {
                    let raised = prefix.map.iter().zip(prev.iter()).find(|((_, now), (_, before))| now > before);
                    if let Some(((id, _), _)) = raised {
                        return Err(format!("neuron {id:?} raised at iteration {k}"));
                    }
                }
                previous = Some(prefix.map);
            }
            if previous.as_ref() != Some(&full.map) {
                return Err("capped replay diverged from the full search".into());
            }
            Ok((full.tolerance_met, iterations))
        })
        .collect();
    let mut met = 0;
    let mut iterations = 0;
    for r in results {
        let (m, it) = r?;
        met += usize::from(m);
        iterations += it;
    }
    Ok(format!(
        "{} synthetic searches ({met} met tolerance, {iterations} iterations replayed), {:.2?}",
        cases.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------------------

fn write_synthetic_idx(dir: &Path, train: usize, test: usize) -> Result<DataPaths, String> {
    let paths = DataPaths::mnist_dir(dir);
    for (n, seed, images, labels) in [
        (train, 11, &paths.train_images, &paths.train_labels),
        (test, 12, &paths.test_images, &paths.test_labels),
    ] {
        let (x, y) = prototype_images(n, 36, 10, 0.12, seed);
        let idx = IdxImages { rows: 6, cols: 6, pixels: x };
        fs::write(images, write_idx_images(&idx)).map_err(|e| e.to_string())?;
        fs::write(labels, write_idx_labels(&y)).map_err(|e| e.to_string())?;
    }
    Ok(paths)
}

fn determinism_and_io() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = write_synthetic_idx(dir.path(), 500, 150)?;

    // IDX round trip from raw bytes, including grey levels
    let mut rng = StdRng::seed_from_u64(5);
    let mut raw = vec![0, 0, 8, 3, 0, 0, 0, 7, 0, 0, 0, 5, 0, 0, 0, 4];
    raw.extend((0..7 * 5 * 4).map(|_| rng.random::<u8>()));
    let images = load_idx_images(&raw).map_err(|e| e.to_string())?;
    if write_idx_images(&images) != raw {
        return Err("IDX image bytes changed on round trip".into());
    }
    let mut raw_labels = vec![0, 0, 8, 1, 0, 0, 0, 50];
    raw_labels.extend((0..50).map(|_| rng.random_range(0..10u8)));
    let labels = load_idx_labels(&raw_labels, 10).map_err(|e| e.to_string())?;
    if write_idx_labels(&labels) != raw_labels {
        return Err("IDX label bytes changed on round trip".into());
    }
    for p in [&paths.train_images, &paths.test_images] {
        let bytes = fs::read(p).map_err(|e| e.to_string())?;
        if write_idx_images(&load_idx_images(&bytes).map_err(|e| e.to_string())?) != bytes {
            return Err(format!("{} changed on round trip", p.display()));
        }
    }

    let text = r#"
        arch = [12]
        objective = "gt"
        mode = "supervised"
        labeled = 300
        validation = 100
        noise_factors = [0.1, 0.2, 0.3]
        mc_runs = 3
        base_seed = 42
        output = "out"

        [pretrain]
        epochs = 3

        [top]
        epochs = 10

        [data]
        train_images = "unused"
        train_labels = "unused"
        test_images = "unused"
        test_labels = "unused"
    "#;
    let mut cfg = ExperimentConfig::from_toml(text).map_err(|e| e.to_string())?;
    cfg.data = paths;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        cfg.output = dir.path().join(name);
        let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
        if summary.successful_runs != cfg.mc_runs {
            return Err(format!("{} of {} runs failed: {:?}", cfg.mc_runs - summary.successful_runs, cfg.mc_runs, summary.failed));
        }
        let rows = read_runs_csv(&cfg.output.join(RUNS_CSV)).map_err(|e| e.to_string())?;
        let want = summary.successful_runs * (1 + cfg.noise_factors.len());
        if rows.len() != want {
            return Err(format!("runs.csv has {} rows, expected {want}", rows.len()));
        }
        outputs.push(cfg.output.clone());
    }
    for file in [RUNS_CSV, SUMMARY_JSON] {
        let a = fs::read(outputs[0].join(file)).map_err(|e| e.to_string())?;
        let b = fs::read(outputs[1].join(file)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{file} differs between identical runs"));
        }
    }
    Ok(format!(
        "IDX round trips byte-exact; runs.csv and summary.json identical over {} repeated runs; row count {}",
        cfg.mc_runs,
        cfg.mc_runs * (1 + cfg.noise_factors.len())
    ))
}

// ---------------------------------------------------------------------------------------
// Scaled MNIST study shared by the trend criteria.

fn workspace_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("crate lives two levels below the root")
}

fn mnist_dir() -> PathBuf {
    env::var_os("AXDBN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data").join("mnist"))
}

/// Test-set outcome of one search on one trained model.
#[derive(Debug, Clone)]
struct Reduced {
    tolerance_met: bool,
    avg_bitwidth: f64,
    br_acc: f64,
    /// Clean accuracy first, then one entry per noise factor.
    fp_curve: Vec<f64>,
    br_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SeedRun {
    fp_acc: f64,
    full: Reduced,
    restricted: Option<Reduced>,
}

struct Study {
    gt: Vec<SeedRun>,
    dt: Vec<SeedRun>,
    ssl_gt: Vec<SeedRun>,
    ssl_dt: Vec<SeedRun>,
    contract_violations: Vec<String>,
}

fn scaled_config(objective: Objective, data: DataPaths) -> Result<ExperimentConfig, String> {
    let text = format!(
        r#"
        arch = [50, 25]
        objective = "{}"
        mode = "supervised"
        labeled = 10000
        test = 2000
        noise_factors = [0.1, 0.2, 0.3]
        mc_runs = {MNIST_SEEDS}
        base_seed = 1
        output = "unused"

        [ax]
        tolerance = {MNIST_TOLERANCE}

        [data]
        train_images = "unused"
        train_labels = "unused"
        test_images = "unused"
        test_labels = "unused"
        "#,
        objective.short_name()
    );
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    cfg.data = data;
    Ok(cfg)
}

fn reduce(
    cfg: &ExperimentConfig,
    rd: &axdbn::harness::RunData,
    fp: &DbnModel,
    beta: f64,
    violations: &mut Vec<String>,
) -> Result<Reduced, String> {
    let ax = approximate_run(cfg, rd, fp, beta).map_err(|e| e.to_string())?;
    if let Err(e) = check_contract(&ax, fp, rd.eval_set(cfg), cfg.ax.tolerance) {
        violations.push(format!("{} run {}: {e}", cfg.objective.short_name(), rd.run));
    }
    let (fp_acc, br_acc, noisy) = evaluate_run(cfg, rd, fp, &ax.model).map_err(|e| e.to_string())?;
    let curve = |clean: f64, pick: fn(&NoisyAccuracy) -> f64| {
        std::iter::once(clean).chain(noisy.iter().map(pick)).collect::<Vec<_>>()
    };
    Ok(Reduced {
        tolerance_met: ax.tolerance_met,
        avg_bitwidth: ax.avg_bitwidth,
        br_acc,
        fp_curve: curve(fp_acc, |n| n.fp_acc),
        br_curve: curve(br_acc, |n| n.br_acc),
    })
}

fn study_run(cfg: &ExperimentConfig, data: &ExperimentData, run: usize, restricted: bool) -> Result<(SeedRun, Vec<String>), String> {
    let rd = prepare_run(cfg, data, run).map_err(|e| e.to_string())?;
    let beta = run_beta(cfg, &rd).map_err(|e| e.to_string())?;
    let fp = train_run(cfg, &rd, beta).map_err(|e| e.to_string())?;
    let fp_acc = accuracy(&fp, &rd.test).map_err(|e| e.to_string())?;
    let mut violations = Vec::new();
    let full = reduce(cfg, &rd, &fp, beta, &mut violations)?;
    let restricted = if restricted {
        let mut r = cfg.clone();
        r.ax.levels = BitwidthLevel::parse_list("0,4,8").map_err(|e| e.to_string())?;
        Some(reduce(&r, &rd, &fp, beta, &mut violations)?)
    } else {
        None
    };
    eprintln!(
        "[acceptance] {} {} run {run}: fp {fp_acc:.4} br {:.4} bits {:.3}",
        cfg.objective.short_name(),
        cfg.mode_label(),
        full.br_acc,
        full.avg_bitwidth
    );
    Ok((SeedRun { fp_acc, full, restricted }, violations))
}

fn run_study() -> Result<Study, String> {
    let dir = mnist_dir();
    let paths = DataPaths::mnist_dir(&dir);
    let data = ExperimentData::load(&paths).map_err(|e| format!("MNIST not available in {} ({e})", dir.display()))?;

    let mut jobs = Vec::new();
    for objective in [Objective::Generative, Objective::Discriminative] {
        let sup = scaled_config(objective, paths.clone())?;
        let mut ssl = sup.clone();
        ssl.mode = Mode::SemiSupervised;
        ssl.labeled = 2000;
        ssl.unlabeled = 8000;
        for run in 0..MNIST_SEEDS {
            jobs.push((sup.clone(), run, true));
            jobs.push((ssl.clone(), run, false));
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(cfg, run, restricted)| study_run(cfg, &data, *run, *restricted).map(|r| (cfg.objective, cfg.mode, r)))
        .collect();
    let mut study = Study {
        gt: Vec::new(),
        dt: Vec::new(),
        ssl_gt: Vec::new(),
        ssl_dt: Vec::new(),
        contract_violations: Vec::new(),
    };
    for r in results {
        let (objective, mode, (run, violations)) = r?;
        study.contract_violations.extend(violations);
        match (objective, mode) {
            (Objective::Generative, Mode::Supervised) => study.gt.push(run),
            (Objective::Discriminative, Mode::Supervised) => study.dt.push(run),
            (Objective::Generative, Mode::SemiSupervised) => study.ssl_gt.push(run),
            (Objective::Discriminative, Mode::SemiSupervised) => study.ssl_dt.push(run),
        }
    }
    Ok(study)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn training_sanity(s: &Study) -> Outcome {
    let acc = s.gt[0].fp_acc;
    let detail = format!(
        "GT-DBN-50-25 on 10000 images: {:.2}% on 2000 test images (mean over seeds {:.2}%)",
        100.0 * acc,
        100.0 * mean(s.gt.iter().map(|r| r.fp_acc))
    );
    if acc >= 0.85 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn objective_trend(s: &Study) -> Outcome {
    let (gt, dt) = (mean(s.gt.iter().map(|r| r.fp_acc)), mean(s.dt.iter().map(|r| r.fp_acc)));
    let detail = format!("mean FP accuracy DT {:.2}% vs GT {:.2}%", 100.0 * dt, 100.0 * gt);
    if dt > gt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn restricted_trend(s: &Study) -> Outcome {
    let met = |runs: &[SeedRun]| {
        runs.iter()
            .filter(|r| r.restricted.as_ref().is_some_and(|x| x.tolerance_met))
            .count()
    };
    let (gt, dt) = (met(&s.gt), met(&s.dt));
    let detail = format!("levels {{0,4,8}} at 5%: GT met tolerance in {gt}/{MNIST_SEEDS} seeds, DT in {dt}/{MNIST_SEEDS}");
    if gt > dt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Mean bitwidths over the seeds where both objectives met tolerance.
fn bit_means(gt: &[SeedRun], dt: &[SeedRun]) -> Option<(f64, f64, usize)> {
    let both: Vec<(f64, f64)> = gt
        .iter()
        .zip(dt)
        .filter(|(g, d)| g.full.tolerance_met && d.full.tolerance_met)
        .map(|(g, d)| (g.full.avg_bitwidth, d.full.avg_bitwidth))
        .collect();
    (!both.is_empty()).then(|| (mean(both.iter().map(|b| b.0)), mean(both.iter().map(|b| b.1)), both.len()))
}

fn bitwidth_trend(s: &Study) -> Outcome {
    let (gt, dt, n) = bit_means(&s.gt, &s.dt).ok_or("no seed where both objectives met tolerance")?;
    let detail = format!("mean avg bitwidth over {n} seeds: GT {gt:.3} vs DT {dt:.3}");
    if gt < dt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ood_trend(s: &Study) -> Outcome {
    // noise 0.2 is the third point of each curve
    let (gt, dt) = (mean(s.gt.iter().map(|r| r.full.br_curve[2])), mean(s.dt.iter().map(|r| r.full.br_curve[2])));
    let mut detail = format!("BR accuracy at noise 0.2: GT {:.2}% vs DT {:.2}%", 100.0 * gt, 100.0 * dt);
    for (name, runs) in [("GT", &s.gt), ("DT", &s.dt)] {
        for (seed, r) in runs.iter().enumerate() {
            for (kind, curve) in [("FP", &r.full.fp_curve), ("BR", &r.full.br_curve)] {
                if curve.windows(2).any(|w| w[1] > w[0] + NOISE_SLACK) {
                    detail.push_str(&format!("; {name} {kind} seed {seed} rises with noise: {curve:?}"));
                    return Err(detail);
                }
            }
        }
    }
    detail.push_str("; all curves monotone within 1 point");
    if gt > dt {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ssl_trend(s: &Study) -> Outcome {
    let (gt, dt, n) = bit_means(&s.gt, &s.dt).ok_or("no supervised seed where both objectives met tolerance")?;
    let ssl_gt = mean(s.ssl_gt.iter().map(|r| r.full.avg_bitwidth));
    let ssl_dt = mean(s.ssl_dt.iter().map(|r| r.full.avg_bitwidth));
    let (sup_gap, ssl_gap) = ((dt - gt).abs(), (ssl_dt - ssl_gt).abs());
    let detail = format!(
        "bitwidth gap [2k,8k] {ssl_gap:.3} (GT {ssl_gt:.3}, DT {ssl_dt:.3}) vs supervised {sup_gap:.3} over {n} seeds"
    );
    if ssl_gap < sup_gap {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut verdicts: Vec<(u32, &str, Outcome)> = vec![
        (1, "free energy and posterior vs enumeration", free_energy_oracle()),
        (2, "gradients vs finite differences", gradient_checks()),
        (3, "fixed-point quantizer properties", quantizer_properties()),
    ];
    let synthetic = ax_contract();
    let study = run_study();
    let contract = match (&synthetic, &study) {
        (Err(e), _) => Err(e.clone()),
        (Ok(s), Ok(st)) if !st.contract_violations.is_empty() => Err(format!("{s}; MNIST: {}", st.contract_violations.join("; "))),
        (Ok(s), Ok(st)) => {
            // supervised seeds run the full and the restricted level set
            let searches = 2 * (st.gt.len() + st.dt.len()) + st.ssl_gt.len() + st.ssl_dt.len();
            Ok(format!("{s}; {searches} MNIST searches also hold"))
        }
        (Ok(s), Err(_)) => Ok(s.clone()),
    };
    let on_study = |f: fn(&Study) -> Outcome| match &study {
        Ok(s) => f(s),
        Err(e) => Err(e.clone()),
    };
    verdicts.push((4, "training sanity on scaled MNIST", on_study(training_sanity)));
    verdicts.push((5, "DT full-precision accuracy above GT", on_study(objective_trend)));
    verdicts.push((6, "bitwidth search contract", contract));
    verdicts.push((7, "restricted levels favor GT", on_study(restricted_trend)));
    verdicts.push((8, "GT needs fewer bits than DT", on_study(bitwidth_trend)));
    verdicts.push((9, "GT more robust to noise after reduction", on_study(ood_trend)));
    verdicts.push((10, "semi-supervised narrows the bitwidth gap", on_study(ssl_trend)));
    verdicts.push((11, "determinism and file formats", determinism_and_io()));

    let mut failed = 0;
    for (id, name, outcome) in &verdicts {
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
