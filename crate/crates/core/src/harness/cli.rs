//! The `sparseful` command line.
//!
//! Exit status: 0 on success, 1 for bad arguments or configuration, 2 when
//! the run itself fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{load_config, ExperimentConfig};
use super::experiment::{calibrate, Experiment};
use super::metrics::write_metrics_csv;
use crate::compression::{codec, nonzero_macs_compressed, serialized_size, CompressionStrategy};
use crate::error::Error;
use crate::protocol::Arm;

#[derive(Debug, Parser)]
#[command(
    name = "sparseful",
    version,
    about = "Self-federated learning simulator with sparse, quantized models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sparsefuel")]
        arm: Arm,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-round wall-clock time (makes the CSV non-reproducible).
        #[arg(long)]
        timed: bool,
    },
    /// Repeat a run for several sparsity levels, one CSV each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5,0.7,0.9")]
        psi: Vec<f64>,
        #[arg(long, default_value = "sparsefuel")]
        arm: Arm,
        #[arg(long)]
        seed: Option<u64>,
        /// Base CSV path; each run appends `_psi<value>` to the file stem.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure dissimilarities after isolated warm-up rounds and print the
    /// recommended threshold.
    CalibrateTau {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print sizes and nonzero counts of model checkpoints. Ratios are
    /// relative to the first file.
    InspectModel {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = load_config(path).map_err(|e| match e {
        Error::Config { .. } => Failure::Config(format!("{}: {e}", path.display())),
        other => Failure::Config(other.to_string()),
    })?;
    if let Some(s) = seed {
        cfg.environment.seed = s;
    }
    Ok(cfg)
}

/// `metrics.csv` with psi 0.3 becomes `metrics_psi0.3.csv`.
pub fn sweep_path(base: &Path, psi: f64) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_psi{psi}.{}", ext.to_string_lossy()),
        None => format!("{stem}_psi{psi}"),
    };
    base.with_file_name(name)
}

fn run_one(cfg: &ExperimentConfig, arm: Arm, csv: &Path, timed: bool, out: &mut dyn Write) -> Result<(), Failure> {
    let mut exp = Experiment::new(cfg, arm).map_err(Failure::runtime)?.timed(timed);
    if let Some(c) = exp.calibration() {
        let _ = writeln!(out, "calibrated tau = {}", c.tau);
    }
    let records = exp.run_to_end().map_err(Failure::runtime)?;
    write_metrics_csv(&records, cfg.subregion_count(), csv).map_err(Failure::runtime)?;
    if let Some(dir) = &cfg.output.checkpoint_dir {
        let paths = exp.write_checkpoints(dir).map_err(Failure::runtime)?;
        let _ = writeln!(out, "wrote {} checkpoints to {}", paths.len(), dir.display());
    }
    if let Some(last) = records.last() {
        let _ = writeln!(
            out,
            "{arm}: {} rounds, {} federations, objective {}, {} bytes -> {}",
            last.round,
            last.federation_count,
            super::format_g(last.objective),
            last.bytes_total,
            csv.display()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            arm,
            seed,
            out: csv,
            timed,
        } => {
            let cfg = read_config(&config, seed)?;
            let csv = csv.unwrap_or_else(|| cfg.output.csv.clone());
            run_one(&cfg, arm, &csv, timed, out)
        }
        Command::Sweep {
            config,
            psi,
            arm,
            seed,
            out: csv,
        } => {
            let base = read_config(&config, seed)?;
            for &p in &psi {
                CompressionStrategy::new(base.protocol.kind, p).map_err(|e| Failure::Config(format!("--psi: {e}")))?;
            }
            let csv = csv.unwrap_or_else(|| base.output.csv.clone());
            for p in psi {
                let mut cfg = base.clone();
                cfg.protocol.psi = p;
                if let Some(dir) = &base.output.checkpoint_dir {
                    cfg.output.checkpoint_dir = Some(dir.join(format!("psi{p}")));
                }
                run_one(&cfg, arm, &sweep_path(&csv, p), false, out)?;
            }
            Ok(())
        }
        Command::CalibrateTau { config, seed } => {
            let cfg = read_config(&config, seed)?;
            let c = calibrate(&cfg).map_err(Failure::runtime)?;
            let med = |m: Option<f64>| m.map_or_else(|| "none".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "intra-subregion edges: {}, median ds {}",
                c.intra_edges,
                med(c.intra_median)
            );
            let _ = writeln!(
                out,
                "inter-subregion edges: {}, median ds {}",
                c.inter_edges,
                med(c.inter_median)
            );
            let _ = writeln!(out, "tau = {}", c.tau);
            Ok(())
        }
        Command::InspectModel { paths } => {
            let mut first: Option<u64> = None;
            let _ = writeln!(out, "path\tkind\tbytes\tparameters\tnonzero\tnonzero_weights\tratio");
            for p in paths {
                let model = codec::load(&p).map_err(|e| match e {
                    Error::Io { .. } => Failure::Config(e.to_string()),
                    other => Failure::Runtime(format!("{}: {other}", p.display())),
                })?;
                let size = serialized_size(&model);
                let base = *first.get_or_insert(size);
                let params = model.to_params();
                let nonzero = params.tensors().flatten().filter(|v| **v != 0.0).count();
                let _ = writeln!(
                    out,
                    "{}\t{}\t{size}\t{}\t{nonzero}\t{}\t{:.4}",
                    p.display(),
                    model.kind(),
                    params.parameter_count(),
                    nonzero_macs_compressed(&model),
                    size as f64 / base as f64
                );
            }
            Ok(())
        }
    }
}

/// Parse `args` (program name first), run the command and return the exit
/// status. Normal output goes to `out`, diagnostics to `err`.
pub fn cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{e}");
            return 1;
        }
    };
    match dispatch(parsed, out) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}
