//! `polyq` command-line interface.
//!
//! Exit codes: 0 success (and `--help`), 1 validation error or unknown
//! subcommand, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polyq::bench::{
    self, bandwidth_sweep, diagnose_remainder, emit_report, mode_diagnostics_csv, run_experiment, scale_csv, scale_k,
    sweep_csv, sweep_mean_rmse, ExperimentConfig, GAMMA_MULTIPLIERS,
};
use polyq::data::{load_dataset, save_dataset, ActionMatrix, Dataset};
use polyq::dgp::{self, DgpSpec};
use polyq::train::{Mode, TrainedEstimator};
use polyq::Error;

#[derive(Debug, Parser)]
#[command(
    name = "polyq",
    version,
    about = "Policy-embedded Q estimation with LTMLE targeting on simulated longitudinal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the data seed (and the seed list of run-experiment).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Estimator mode: joint_peq or separate (overrides `modes`).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Targeting units: "reuse-all" or a held-out fraction such as 0.2.
    #[arg(long = "eval-split", global = true, value_name = "SPLIT")]
    eval_split: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cohort and write it as JSONL (`data.jsonl`).
    Simulate {
        /// Number of trajectories (defaults to the config's `n`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Embed the suite's policies; writes `embeddings.csv` and `stress.csv`.
    EmbedPolicies {
        /// JSONL cohort; simulated from the config when omitted.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Train estimators; writes `checkpoint_<mode>.json` and `training_log_<mode>.csv`.
    Train {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Target a trained checkpoint with LTMLE; writes `estimates_<mode>.csv`.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Full multi-seed protocol; writes `metrics.csv`, `summary.md`, `rmse.svg`.
    RunExperiment,
    /// Remainder Terms I-III against the baseline; writes `diagnostics.csv`.
    DiagnoseRemainder,
    /// Joint-mode runs per kernel bandwidth multiplier; writes `bandwidth.csv`.
    BandwidthSweep {
        /// Comma-separated multipliers.
        #[arg(long, value_delimiter = ',', default_values_t = GAMMA_MULTIPLIERS.to_vec())]
        multipliers: Vec<f64>,
    },
    /// Embedding runtime against the number of policies; writes `scale_k.csv`.
    #[command(name = "scale-K", alias = "scale-k")]
    ScaleK {
        /// Comma-separated policy counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![5usize, 10, 20])]
        ks: Vec<usize>,
        /// Timing repetitions per K (the fastest is reported).
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

/// Error classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn invalid(e: Error) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("runtime failure: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// Loads the configuration and applies command-line overrides.
fn resolve_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(invalid)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dgp.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = &cli.mode {
        cfg.modes = vec![mode.parse::<Mode>().map_err(invalid)?];
    }
    if let Some(split) = &cli.eval_split {
        cfg.eval_split = split.clone();
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> std::result::Result<&Path, Failure> {
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| {
        runtime(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })?;
    Ok(dir)
}

fn write(path: PathBuf, text: &str) -> Outcome {
    std::fs::write(&path, text).map_err(|e| {
        runtime(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

/// The data seed: `--seed`, else the first configured seed.
fn data_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn cohort(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> std::result::Result<Dataset, Failure> {
    match data {
        Some(p) => load_dataset(p).map_err(invalid),
        None => {
            let spec = DgpSpec {
                seed: data_seed(cfg),
                ..cfg.dgp.clone()
            };
            dgp::simulate(&spec, cfg.n).map_err(runtime)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Simulate { n } => {
            let spec = DgpSpec {
                seed: data_seed(&cfg),
                ..cfg.dgp.clone()
            };
            let ds = dgp::simulate(&spec, n.unwrap_or(cfg.n)).map_err(invalid)?;
            let path = out_dir(&cfg)?.join("data.jsonl");
            save_dataset(&ds, &path).map_err(runtime)?;
            println!("wrote {} ({} trajectories, tau={})", path.display(), ds.len(), ds.tau);
            Ok(())
        }
        Command::EmbedPolicies { data } => {
            let ds = cohort(&cfg, data)?;
            let joint = ExperimentConfig {
                modes: vec![Mode::JointPeq],
                ..cfg.clone()
            };
            let sd = bench::prepare_with_data(&joint, data_seed(&cfg), ds).map_err(runtime)?;
            let dir = out_dir(&cfg)?;
            write(dir.join("embeddings.csv"), &sd.embedding.to_csv())?;
            write(dir.join("stress.csv"), &sd.embedding.stress_csv())
        }
        Command::Train { data } => {
            let ds = cohort(&cfg, data)?;
            let sd = bench::prepare_with_data(&cfg, data_seed(&cfg), ds).map_err(runtime)?;
            let dir = out_dir(&cfg)?;
            for &mode in &cfg.modes {
                let est = bench::fit_mode(&cfg, &sd, mode).map_err(runtime)?;
                let ck = dir.join(format!("checkpoint_{mode}.json"));
                est.save(&ck).map_err(runtime)?;
                println!("wrote {}", ck.display());
                let log = dir.join(format!("training_log_{mode}.csv"));
                est.write_log(&log).map_err(runtime)?;
                println!("wrote {}", log.display());
            }
            Ok(())
        }
        Command::Evaluate { checkpoint, data } => {
            let est = TrainedEstimator::load(checkpoint).map_err(invalid)?;
            let ds = cohort(&cfg, data)?;
            if ds.tau != est.embedding.tau() {
                return Err(Failure::Validation(format!(
                    "checkpoint covers tau={} but the data has tau={}",
                    est.embedding.tau(),
                    ds.tau
                )));
            }
            let spec = DgpSpec {
                seed: data_seed(&cfg),
                ..cfg.dgp.clone()
            };
            let am = ActionMatrix::build(&est.policies, &ds, Some(&spec)).map_err(runtime)?;
            let (ds, am) = match bench::eval_indices(&cfg, ds.len(), data_seed(&cfg)).map_err(invalid)?.1 {
                None => (ds, am),
                Some(idx) => (ds.subset(&idx), am.subset(&idx)),
            };
            let (report, status) = bench::target_estimator(&est, &ds, &am, &cfg.target).map_err(runtime)?;
            for (label, e) in &status {
                if let Some(e) = e {
                    eprintln!("warning: policy {label} was not estimated: {e}");
                }
            }
            write(out_dir(&cfg)?.join(format!("estimates_{}.csv", est.mode)), &report.to_csv())?;
            for p in &report.policies {
                println!(
                    "{:>12}  psi_hat {:+.5}  se {:.5}  95% CI [{:+.5}, {:+.5}]",
                    p.label, p.psi_hat, p.se, p.ci.0, p.ci.1
                );
            }
            Ok(())
        }
        Command::RunExperiment => {
            let m = run_experiment(&cfg).map_err(runtime)?;
            let dir = out_dir(&cfg)?;
            let title = format!("{} (tau={}, n={})", cfg.suite.name(), cfg.dgp.tau, cfg.n);
            for p in emit_report(&m, dir, &title).map_err(runtime)? {
                println!("wrote {}", p.display());
            }
            for a in &m.aggregates {
                println!(
                    "{:>10} {:>10}  mean|bias| {:.4} ± {:.4}  RMSE {:.4}  (n={})",
                    a.contrast, a.mode, a.mean_abs_bias, a.sd, a.rmse, a.n_seeds
                );
            }
            if !m.failures.is_empty() {
                eprintln!("warning: {} failed seed/contrast runs (see summary.md)", m.failures.len());
            }
            Ok(())
        }
        Command::DiagnoseRemainder => {
            let all = diagnose_remainder(&cfg).map_err(|e| match e {
                Error::OracleBudget(_) => invalid(e),
                other => runtime(other),
            })?;
            write(out_dir(&cfg)?.join("diagnostics.csv"), &mode_diagnostics_csv(&all))?;
            for m in &all {
                match m.max_and_median() {
                    Some((max, med)) => println!(
                        "{}: |Rem|/MMD max {max:.4}, median {med:.4}, bounded by 10x median: {}",
                        m.mode,
                        m.lipschitz_bounded(10.0)
                    ),
                    None => println!("{}: no pair has a defined ratio", m.mode),
                }
            }
            Ok(())
        }
        Command::BandwidthSweep { multipliers } => {
            if multipliers.is_empty() || multipliers.iter().any(|m| !(*m > 0.0)) {
                return Err(Failure::Validation("multipliers must be positive".into()));
            }
            let pts = bandwidth_sweep(&cfg, multipliers).map_err(runtime)?;
            write(out_dir(&cfg)?.join("bandwidth.csv"), &sweep_csv(&pts))?;
            for (m, r) in sweep_mean_rmse(&pts) {
                println!("multiplier {m:>6}: mean RMSE {r:.4}");
            }
            Ok(())
        }
        Command::ScaleK { ks, reps } => {
            if ks.is_empty() || ks.iter().any(|&k| k < 2) {
                return Err(Failure::Validation("every K must be >= 2".into()));
            }
            let spec = DgpSpec {
                seed: data_seed(&cfg),
                ..cfg.dgp.clone()
            };
            let pts = scale_k(&spec, cfg.n, ks, *reps, &cfg.embed).map_err(|e| match e {
                Error::Invalid(_) => invalid(e),
                other => runtime(other),
            })?;
            write(out_dir(&cfg)?.join("scale_k.csv"), &scale_csv(&pts))?;
            for p in &pts {
                println!("K={:>3}: {:.3}s", p.k, p.seconds);
            }
            Ok(())
        }
    }
}
