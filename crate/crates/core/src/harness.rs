//! Experiment configuration, the Monte Carlo runner and result files.
//!
//! Every run derives its own seed from `base_seed` and the run index, so runs are independent
//! and the output files are identical across invocations with the same configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{ax_dbn, ApproxResult, AxConfig};
use crate::data::{split_semi_supervised, Dataset, NoiseSpec, SplitSpec, MNIST_CLASSES};
use crate::dbn::{accuracy, train_greedy, Architecture, DbnModel, DbnTrainConfig};
use crate::drbm::{Objective, SslConfig};
use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::rbm::TrainConfig;

pub const RUNS_CSV: &str = "runs.csv";
pub const SUMMARY_JSON: &str = "summary.json";

// Seed streams within one run.
const SPLIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const APPROX_STREAM: u64 = 3;
const BETA_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    SemiSupervised,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::SemiSupervised => "semi-supervised",
        })
    }
}

/// IDX files. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// Standard MNIST file names inside `dir`.
    pub fn mnist_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Hidden layer sizes bottom-up; the last one feeds the class layer.
    pub arch: Vec<usize>,
    pub objective: Objective,
    pub mode: Mode,
    /// Labeled training images drawn from the training file.
    pub labeled: usize,
    /// Unlabeled training images; must be 0 in supervised mode.
    #[serde(default)]
    pub unlabeled: usize,
    /// Held-out labeled images from the training file used for tolerance checks.
    #[serde(default = "default_validation")]
    pub validation: usize,
    /// Leading images of the test file used for reporting; 0 means all.
    #[serde(default)]
    pub test: usize,
    /// Use the test images instead of the validation split for tolerance checks.
    #[serde(default)]
    pub eval_on_test: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// When nonempty in semi-supervised mode, each run picks `beta` from this list by
    /// validation accuracy.
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    #[serde(default)]
    pub noise_factors: Vec<f64>,
    #[serde(default = "default_runs")]
    pub mc_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "default_top")]
    pub top: TrainConfig,
    /// `objective` and `ssl` inside are overwritten from the fields above.
    #[serde(default)]
    pub ax: AxConfig,
    pub data: DataPaths,
    pub output: PathBuf,
}

fn default_validation() -> usize {
    1_000
}

fn default_beta() -> f64 {
    SslConfig::DEFAULT_BETA
}

fn default_runs() -> usize {
    10
}

fn default_pretrain() -> TrainConfig {
    DbnTrainConfig::default().pretrain
}

fn default_top() -> TrainConfig {
    DbnTrainConfig::default().top
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mc_runs == 0 {
            return bad("mc_runs must be >= 1".into());
        }
        if self.labeled == 0 {
            return bad("labeled must be >= 1".into());
        }
        if self.mode == Mode::Supervised && self.unlabeled > 0 {
            return bad("unlabeled images require mode = \"semi-supervised\"".into());
        }
        if !self.eval_on_test && self.validation == 0 {
            return bad("validation must be >= 1 unless eval_on_test is set".into());
        }
        if let Some(f) = self.noise_factors.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("noise factor {f} outside [0, 1]"));
        }
        if let Some(b) = std::iter::once(&self.beta)
            .chain(&self.beta_grid)
            .find(|b| !(**b >= 0.0 && b.is_finite()))
        {
            return bad(format!("beta {b} must be finite and >= 0"));
        }
        self.architecture(1)?;
        self.pretrain.validate()?;
        self.top.validate()?;
        self.ax_config(self.beta).validate()
    }

    /// Architecture for images of `visible` pixels.
    pub fn architecture(&self, visible: usize) -> Result<Architecture> {
        Architecture::new(visible, self.arch.clone(), MNIST_CLASSES).map_err(|e| Error::Config(e.to_string()))
    }

    fn ssl(&self, beta: f64) -> Option<SslConfig> {
        (self.mode == Mode::SemiSupervised).then_some(SslConfig {
            beta,
            objective: self.objective,
        })
    }

    fn ax_config(&self, beta: f64) -> AxConfig {
        AxConfig {
            objective: self.objective,
            ssl: self.ssl(beta),
            ..self.ax.clone()
        }
    }

    fn train_config(&self, beta: f64, seed: u64) -> DbnTrainConfig {
        DbnTrainConfig {
            pretrain: self.pretrain.clone(),
            top: self.top.clone(),
            objective: self.objective,
            ssl: self.ssl(beta),
            seed,
        }
    }

    pub fn mode_label(&self) -> String {
        match self.mode {
            Mode::Supervised => self.mode.to_string(),
            Mode::SemiSupervised => format!("{}-{}-{}", self.mode, self.labeled, self.unlabeled),
        }
    }
}

/// Training and test files, loaded once and shared by every run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

impl ExperimentData {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let train = Dataset::from_idx_files(&paths.train_images, Some(&paths.train_labels), MNIST_CLASSES)?;
        let test = Dataset::from_idx_files(&paths.test_images, Some(&paths.test_labels), MNIST_CLASSES)?;
        Ok(Self { train, test })
    }
}

/// Everything one run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct RunData {
    pub run: usize,
    pub seed: u64,
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl RunData {
    pub fn eval_set(&self, config: &ExperimentConfig) -> &Dataset {
        if config.eval_on_test {
            &self.test
        } else {
            &self.validation
        }
    }
}

pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    derive_seed(base_seed, run as u64)
}

/// Seeded disjoint labeled / unlabeled / validation draw from the training file.
pub fn prepare_run(config: &ExperimentConfig, data: &ExperimentData, run: usize) -> Result<RunData> {
    let seed = run_seed(config.base_seed, run);
    let validation = if config.eval_on_test { 0 } else { config.validation };
    let spec = SplitSpec {
        num_labeled: config.labeled + validation,
        num_unlabeled: config.unlabeled,
        seed: derive_seed(seed, SPLIT_STREAM),
    };
    let (pool, unlabeled) = split_semi_supervised(&data.train, &spec)?;
    let labeled = pool.slice(0, config.labeled);
    let validation = pool.slice(config.labeled, pool.len());
    let test = if config.test == 0 || config.test >= data.test.len() {
        data.test.clone()
    } else {
        data.test.slice(0, config.test)
    };
    Ok(RunData {
        run,
        seed,
        labeled,
        unlabeled,
        validation,
        test,
    })
}

/// Trains with every `beta` in `grid` and returns the one with the best validation accuracy
/// (first wins ties).
pub fn select_beta(config: &ExperimentConfig, run: &RunData, grid: &[f64]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &beta in grid {
        let model = train_model_with_beta(config, run, beta, derive_seed(run.seed, BETA_STREAM))?;
        let acc = accuracy(&model, run.eval_set(config))?;
        if best.is_none_or(|(_, a)| acc > a) {
            best = Some((beta, acc));
        }
    }
    best.map(|(b, _)| b).ok_or(Error::Empty("beta grid"))
}

fn train_model_with_beta(config: &ExperimentConfig, run: &RunData, beta: f64, seed: u64) -> Result<DbnModel> {
    let arch = config.architecture(run.labeled.dim())?;
    train_greedy(&arch, &run.labeled, &run.unlabeled, &config.train_config(beta, seed))
}

/// `beta` used by this run: the configured one, or the grid choice in semi-supervised mode.
pub fn run_beta(config: &ExperimentConfig, run: &RunData) -> Result<f64> {
    if config.mode == Mode::SemiSupervised && !config.beta_grid.is_empty() {
        select_beta(config, run, &config.beta_grid)
    } else {
        Ok(config.beta)
    }
}

/// Full-precision model for one run.
pub fn train_run(config: &ExperimentConfig, run: &RunData, beta: f64) -> Result<DbnModel> {
    train_model_with_beta(config, run, beta, derive_seed(run.seed, TRAIN_STREAM))
}

pub fn approximate_run(config: &ExperimentConfig, run: &RunData, model: &DbnModel, beta: f64) -> Result<ApproxResult> {
    let mut ax = config.ax_config(beta);
    ax.retrain.seed = derive_seed(run.seed, APPROX_STREAM);
    ax_dbn(model, &run.labeled, &run.unlabeled, run.eval_set(config), &ax)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyAccuracy {
    pub noise: f64,
    pub fp_acc: f64,
    pub br_acc: f64,
}

/// Outcome of one successful run. Accuracies are measured on the test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub beta: f64,
    pub fp_acc: f64,
    pub br_acc: f64,
    pub avg_bitwidth: f64,
    pub start_bits: u32,
    pub tolerance_met: bool,
    /// Accuracies on the tolerance-check set.
    pub eval_fp_acc: f64,
    pub eval_br_acc: f64,
    pub noisy: Vec<NoisyAccuracy>,
    /// Not written to result files, which must be reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Test accuracy of `fp` and `br` on clean images and under each noise factor.
pub fn evaluate_run(
    config: &ExperimentConfig,
    run: &RunData,
    fp: &DbnModel,
    br: &DbnModel,
) -> Result<(f64, f64, Vec<NoisyAccuracy>)> {
    let fp_acc = accuracy(fp, &run.test)?;
    let br_acc = accuracy(br, &run.test)?;
    let mut noisy = Vec::with_capacity(config.noise_factors.len());
    for (i, &noise) in config.noise_factors.iter().enumerate() {
        let spec = NoiseSpec::new(noise, derive_seed(run.seed, NOISE_STREAM + i as u64))?;
        let corrupted = run.test.with_salt_pepper(&spec);
        noisy.push(NoisyAccuracy {
            noise,
            fp_acc: accuracy(fp, &corrupted)?,
            br_acc: accuracy(br, &corrupted)?,
        });
    }
    Ok((fp_acc, br_acc, noisy))
}

/// A successful run with its final bit-reduced model.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: DbnModel,
}

pub fn execute_run(config: &ExperimentConfig, data: &ExperimentData, run: usize) -> Result<RunOutput> {
    let start = Instant::now();
    let rd = prepare_run(config, data, run)?;
    let beta = run_beta(config, &rd)?;
    let fp = train_run(config, &rd, beta)?;
    let approx = approximate_run(config, &rd, &fp, beta)?;
    let (fp_acc, br_acc, noisy) = evaluate_run(config, &rd, &fp, &approx.model)?;
    let record = RunRecord {
        run,
        seed: rd.seed,
        beta,
        fp_acc,
        br_acc,
        avg_bitwidth: approx.avg_bitwidth,
        start_bits: approx.start_level.bits(),
        tolerance_met: approx.tolerance_met,
        eval_fp_acc: approx.fp_accuracy,
        eval_br_acc: approx.br_accuracy,
        noisy,
        wall_time: start.elapsed(),
    };
    log::info!(
        "run {run}: fp {:.4} br {:.4} avg bits {:.3} tolerance met {} ({:.1?})",
        record.fp_acc,
        record.br_acc,
        record.avg_bitwidth,
        record.tolerance_met,
        record.wall_time
    );
    Ok(RunOutput {
        record,
        model: approx.model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub noise: f64,
    pub fp_acc: f64,
    pub br_acc: f64,
}

/// Means over successful runs; `None` when there were none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMeans {
    pub fp_acc: f64,
    pub br_acc: f64,
    pub avg_bitwidth: f64,
    pub eval_fp_acc: f64,
    pub eval_br_acc: f64,
    pub noisy: Vec<NoiseSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub objective: Objective,
    pub arch: String,
    pub mode: String,
    pub tolerance: f64,
    pub levels: Vec<u32>,
    pub base_seed: u64,
    pub successful_runs: usize,
    pub tolerance_met_runs: usize,
    pub failed: Vec<FailedRun>,
    pub means: Option<SummaryMeans>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn summarize(config: &ExperimentConfig, records: &[RunRecord], failed: Vec<FailedRun>) -> SummaryTable {
    let means = (!records.is_empty()).then(|| SummaryMeans {
        fp_acc: mean(records.iter().map(|r| r.fp_acc)),
        br_acc: mean(records.iter().map(|r| r.br_acc)),
        avg_bitwidth: mean(records.iter().map(|r| r.avg_bitwidth)),
        eval_fp_acc: mean(records.iter().map(|r| r.eval_fp_acc)),
        eval_br_acc: mean(records.iter().map(|r| r.eval_br_acc)),
        noisy: config
            .noise_factors
            .iter()
            .enumerate()
            .map(|(i, &noise)| NoiseSummary {
                noise,
                fp_acc: mean(records.iter().map(|r| r.noisy[i].fp_acc)),
                br_acc: mean(records.iter().map(|r| r.noisy[i].br_acc)),
            })
            .collect(),
    });
    SummaryTable {
        objective: config.objective,
        arch: arch_label(&config.arch),
        mode: config.mode_label(),
        tolerance: config.ax.tolerance,
        levels: config.ax.levels.iter().map(|l| l.bits()).collect(),
        base_seed: config.base_seed,
        successful_runs: records.len(),
        tolerance_met_runs: records.iter().filter(|r| r.tolerance_met).count(),
        failed,
        means,
    }
}

fn arch_label(layers: &[usize]) -> String {
    std::iter::once("DBN".to_string())
        .chain(layers.iter().map(|s| s.to_string()))
        .collect::<Vec<_>>()
        .join("-")
}

/// All runs in parallel, ordered by run index. A failing run is logged and reported in the
/// summary instead of aborting the experiment.
pub fn execute_experiment(
    config: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<(Vec<RunOutput>, SummaryTable)> {
    config.validate()?;
    let results: Vec<(usize, Result<RunOutput>)> = (0..config.mc_runs)
        .into_par_iter()
        .map(|r| (r, execute_run(config, data, r)))
        .collect();
    let mut outputs = Vec::new();
    let mut failed = Vec::new();
    for (run, result) in results {
        match result {
            Ok(out) => outputs.push(out),
            Err(e) => {
                log::warn!("run {run} failed and is excluded from the means: {e}");
                failed.push(FailedRun {
                    run,
                    seed: run_seed(config.base_seed, run),
                    error: e.to_string(),
                });
            }
        }
    }
    let records: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let summary = summarize(config, &records, failed);
    Ok((outputs, summary))
}

/// Loads the data, runs every Monte Carlo run and writes the result files to
/// `config.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SummaryTable> {
    let data = ExperimentData::load(&config.data)?;
    let (outputs, summary) = execute_experiment(config, &data)?;
    emit_results(config, &outputs, &summary, &config.output)?;
    Ok(summary)
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run: usize,
    pub seed: u64,
    pub objective: String,
    pub arch: String,
    pub mode: String,
    pub tolerance: f64,
    pub fp_acc: f64,
    pub br_acc: f64,
    pub avg_bitwidth: f64,
    pub noise: f64,
    pub fp_acc_noisy: f64,
    pub br_acc_noisy: f64,
}

/// A clean row (noise 0) followed by one row per noise factor, for each record.
pub fn csv_rows(config: &ExperimentConfig, records: &[RunRecord]) -> Vec<CsvRow> {
    let arch = arch_label(&config.arch);
    let mode = config.mode_label();
    let mut rows = Vec::with_capacity(records.len() * (1 + config.noise_factors.len()));
    for r in records {
        let row = |noise, fp_noisy, br_noisy| CsvRow {
            run: r.run,
            seed: r.seed,
            objective: config.objective.short_name().to_string(),
            arch: arch.clone(),
            mode: mode.clone(),
            tolerance: config.ax.tolerance,
            fp_acc: r.fp_acc,
            br_acc: r.br_acc,
            avg_bitwidth: r.avg_bitwidth,
            noise,
            fp_acc_noisy: fp_noisy,
            br_acc_noisy: br_noisy,
        };
        rows.push(row(0.0, r.fp_acc, r.br_acc));
        for n in &r.noisy {
            rows.push(row(n.noise, n.fp_acc, n.br_acc));
        }
    }
    rows
}

pub fn write_runs_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record([
        "run",
        "seed",
        "objective",
        "arch",
        "mode",
        "tolerance",
        "fp_acc",
        "br_acc",
        "avg_bitwidth",
        "noise",
        "fp_acc_noisy",
        "br_acc_noisy",
    ])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn model_file_name(run: usize) -> String {
    format!("model_run{run:03}.json")
}

/// Writes `runs.csv`, `summary.json` and one model container per successful run into `dir`.
pub fn emit_results(
    config: &ExperimentConfig,
    outputs: &[RunOutput],
    summary: &SummaryTable,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    write_runs_csv(&dir.join(RUNS_CSV), &csv_rows(config, &records))?;
    let json = serde_json::to_string_pretty(summary)?;
    let summary_path = dir.join(SUMMARY_JSON);
    fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;
    for out in outputs {
        out.model.save(&dir.join(model_file_name(out.record.run)))?;
    }
    Ok(())
}
