use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ttawpca::bench::{self, BenchConfig, CorruptionKind, Method};
use ttawpca::network::{train, MapShape, Model};
use ttawpca::pca::PcaBasis;
use ttawpca::{ridge, Error, Result};

#[derive(Parser)]
#[command(name = "ttawpca", version, about = "Spectral-filter test-time adaptation and its corruption benchmark")]
struct Cli {
    /// JSON config; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference model and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Fit the PCA basis on the training split's activations.
    FitPca {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Adapt one method on one (corruption, severity) stream.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Omit for the clean test set.
        #[arg(long, value_parser = parse_corruption)]
        corruption: Option<CorruptionKind>,
        #[arg(long, default_value_t = 5)]
        severity: u8,
        /// Per-batch records as JSON lines.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Full error grid over methods, corruptions and severities.
    Bench {
        #[arg(long)]
        out_dir: PathBuf,
        /// Use this checkpoint instead of training (single replicate only).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        basis: Option<PathBuf>,
    },
    /// Error against PCA rank.
    AblateRank {
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides `ablation.ranks`.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Error against optimizer steps per batch.
    AblateSteps {
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides `ablation.steps`.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Compare the closed-form and spectral ridge solvers.
    VerifyRidge {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown method '{s}'"))
}

fn parse_corruption(s: &str) -> std::result::Result<CorruptionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    match path {
        Some(p) => BenchConfig::load(p),
        None => Ok(BenchConfig::default()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Outcome of a subcommand that may complete but still report a failed check.
enum Status {
    Ok,
    CheckFailed,
}

fn run(cli: Cli) -> Result<Status> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train { out, replicate } => {
            let spec = cfg.dataset_for(replicate);
            let (train_set, test) = bench::gen_dataset(&spec)?;
            let tc = cfg.train_for(replicate);
            let input = MapShape::new(bench::dataset::CHANNELS, bench::dataset::SIDE, bench::dataset::SIDE);
            let mut model = Model::reference(input, spec.n_classes, tc.seed)?;
            let report = train::train(&mut model, &train_set.images, &train_set.labels, &tc)?;
            let clean = train::accuracy(&model, &test.images, &test.labels, 256)?;
            ensure_parent(&out)?;
            model.save(&out)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "replicate": replicate,
                "epoch_loss": report.epoch_loss,
                "train_accuracy": report.train_accuracy,
                "clean_test_accuracy": clean,
                "theta_hash": model.theta_hash(),
            }))?;
        }
        Command::FitPca { model, out, replicate } => {
            let model = Model::load(&model)?;
            let (train_set, _) = bench::gen_dataset(&cfg.dataset_for(replicate))?;
            let (basis, j) = bench::fit_basis(&model, &train_set, &cfg.pca)?;
            ensure_parent(&out)?;
            basis.save_json(&out)?;
            print_json(&serde_json::json!({
                "basis": out,
                "insertion_index": j,
                "features": basis.features(),
                "rank": basis.rank(),
                "requested_rank": basis.requested_rank(),
                "leading_singular_value": basis.singular_values().first(),
            }))?;
        }
        Command::Adapt {
            model,
            basis,
            method,
            corruption,
            severity,
            out,
            replicate,
        } => {
            let (severity, kinds) = match corruption {
                Some(k) => (severity, vec![k]),
                None => (0, cfg.corruptions.clone()),
            };
            if severity == 0 && corruption.is_some() {
                return Err(Error::Config("--severity must be 1..=5 with --corruption".into()));
            }
            let cfg = BenchConfig { corruptions: kinds, ..cfg };
            cfg.validate()?;
            let model = Model::load(&model)?;
            let basis = PcaBasis::load_json(&basis)?;
            let prep = bench::prepare(&cfg, replicate, Some((model, Some(basis))))?;
            let cells = bench::evaluate(&prep, &prep.basis, &cfg, &cfg.adapt, &[method], &[severity])?;
            ensure_parent(&out)?;
            bench::write_records(&cells, &out)?;
            let cell = &cells[0];
            print_json(&serde_json::json!({
                "method": method.name(),
                "protocol": cfg.adapt.protocol.name(),
                "corruption": corruption.map(CorruptionKind::name),
                "severity": severity,
                "error": cell.error(),
                "misclassified": cell.record.misclassified,
                "total": cell.record.total,
                "adaptation_params": cell.record.adaptation_params,
                "frozen_intact": cell.record.frozen_intact(),
            }))?;
        }
        Command::Bench { out_dir, model, basis } => {
            let checkpoint = match model {
                Some(m) => Some((Model::load(&m)?, basis.as_deref().map(PcaBasis::load_json).transpose()?)),
                None => None,
            };
            let outcome = bench::run_benchmark(&cfg, checkpoint)?;
            outcome.write(&out_dir)?;
            outcome.table.write_csv(std::io::stdout().lock())?;
            if !outcome.frozen_weights_intact {
                eprintln!("frozen weights changed during the run");
                return Ok(Status::CheckFailed);
            }
        }
        Command::AblateRank { out_dir, ranks } => {
            let curve = bench::ablate_rank(&cfg, ranks.as_deref().unwrap_or(&cfg.ablation.ranks))?;
            curve.write(&out_dir, "rank")?;
            curve.write_csv(std::io::stdout().lock())?;
        }
        Command::AblateSteps { out_dir, steps } => {
            let curve = bench::ablate_steps(&cfg, steps.as_deref().unwrap_or(&cfg.ablation.steps))?;
            curve.write(&out_dir, "steps")?;
            curve.write_csv(std::io::stdout().lock())?;
        }
        Command::VerifyRidge { trials, seed, out } => {
            let report = ridge::verify_equivalence(trials, seed)?;
            match out {
                Some(p) => {
                    ensure_parent(&p)?;
                    bench::write_json(&report, &p)?;
                }
                None => print_json(&report)?,
            }
            if !report.passed {
                eprintln!(
                    "ridge solvers disagree: max relative deviation {:e} > {:e}",
                    report.max_relative_deviation, report.tolerance
                );
                return Ok(Status::CheckFailed);
            }
        }
    }
    Ok(Status::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
