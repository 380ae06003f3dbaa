use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use axdbn::data::{Dataset, NoiseSpec, MNIST_CLASSES};
use axdbn::dbn::{accuracy, Architecture, DbnModel};
use axdbn::drbm::Objective;
use axdbn::fixed_point::{avg_bitwidth, BitwidthLevel};
use axdbn::harness::{
    approximate_run, prepare_run, run_beta, run_experiment, train_run, ExperimentConfig, ExperimentData, Mode,
};
use axdbn::oracle::run_oracles;
use axdbn::Result;

#[derive(Parser)]
#[command(name = "axdbn", version, about = "Train discriminative DBNs and search per-neuron fixed-point bitwidths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline over all Monte Carlo runs; writes runs.csv, summary.json and models.
    Run(Overrides),
    /// Train the full-precision model of one run.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Bitwidth search on a trained model, using the same run's data split.
    Approximate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Accuracy of a saved model on IDX images, optionally under salt-and-pepper noise.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated noise factors in [0, 1].
        #[arg(long, value_delimiter = ',')]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tiny-model checks of closed forms and gradients against enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
}

/// Command-line values replace the matching config fields.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Hidden layer sizes, e.g. 200,100.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    labeled: Option<usize>,
    /// Nonzero switches to semi-supervised mode; 0 switches to supervised.
    #[arg(long)]
    unlabeled: Option<usize>,
    /// Allowed bitwidths, e.g. 0,4,8.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse().map_err(|e: axdbn::Error| e.to_string())
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(n) = self.runs {
            cfg.mc_runs = n;
        }
        if let Some(t) = self.tolerance {
            cfg.ax.tolerance = t;
        }
        if let Some(o) = self.objective {
            cfg.objective = o;
        }
        if let Some(a) = &self.arch {
            cfg.arch = Architecture::parse_layers(a)?;
        }
        if let Some(l) = self.labeled {
            cfg.labeled = l;
        }
        if let Some(u) = self.unlabeled {
            cfg.unlabeled = u;
            cfg.mode = if u > 0 { Mode::SemiSupervised } else { Mode::Supervised };
        }
        if let Some(l) = &self.levels {
            cfg.ax.levels = BitwidthLevel::parse_list(l)?;
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run(o) => {
            let cfg = o.load()?;
            let summary = run_experiment(&cfg)?;
            print_json(&summary)?;
            Ok(summary.failed.is_empty())
        }
        Command::Train {
            overrides,
            run,
            model_out,
        } => {
            let cfg = overrides.load()?;
            let data = ExperimentData::load(&cfg.data)?;
            let rd = prepare_run(&cfg, &data, run)?;
            let beta = run_beta(&cfg, &rd)?;
            let model = train_run(&cfg, &rd, beta)?;
            model.save(&model_out)?;
            print_json(&serde_json::json!({
                "run": run,
                "seed": rd.seed,
                "beta": beta,
                "eval_acc": accuracy(&model, rd.eval_set(&cfg))?,
                "test_acc": accuracy(&model, &rd.test)?,
            }))?;
            Ok(true)
        }
        Command::Approximate {
            overrides,
            run,
            model,
            model_out,
        } => {
            let cfg = overrides.load()?;
            let data = ExperimentData::load(&cfg.data)?;
            let rd = prepare_run(&cfg, &data, run)?;
            let beta = run_beta(&cfg, &rd)?;
            let fp = DbnModel::load(&model)?;
            let result = approximate_run(&cfg, &rd, &fp, beta)?;
            result.model.save(&model_out)?;
            print_json(&serde_json::json!({
                "run": run,
                "fp_acc": result.fp_accuracy,
                "br_acc": result.br_accuracy,
                "avg_bitwidth": result.avg_bitwidth,
                "start_bits": result.start_level.bits(),
                "tolerance_met": result.tolerance_met,
                "history": result.history,
            }))?;
            Ok(true)
        }
        Command::Evaluate {
            model,
            images,
            labels,
            noise,
            seed,
        } => {
            let model = DbnModel::load(&model)?;
            let ds = Dataset::from_idx_files(&images, Some(&labels), MNIST_CLASSES)?;
            let mut rows = vec![serde_json::json!({"noise": 0.0, "accuracy": accuracy(&model, &ds)?})];
            for f in noise {
                let noisy = ds.with_salt_pepper(&NoiseSpec::new(f, seed)?);
                rows.push(serde_json::json!({"noise": f, "accuracy": accuracy(&model, &noisy)?}));
            }
            let bits = model.bitwidths().map(avg_bitwidth).transpose()?;
            print_json(&serde_json::json!({"avg_bitwidth": bits, "results": rows}))?;
            Ok(true)
        }
        Command::OracleCheck { seed, cases } => {
            let outcomes = run_oracles(seed, cases)?;
            for o in &outcomes {
                println!(
                    "{} {} ({} cases, worst {:.3e})",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.cases,
                    o.worst
                );
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
