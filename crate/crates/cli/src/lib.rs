//! Command-line front end: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! data, numerics and I/O errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lungseg_core::phantom::generate_corpus;
use lungseg_core::pipeline::{
    evaluate_dir, infer_dir, preproc_from_text, preprocess_manifest, report_from_csv, train_from_dir, CorpusConfig,
};
use lungseg_core::segnet::{load_params, NetConfig};
use lungseg_core::trainer::TrainConfig;
use lungseg_core::volume::PreprocSpec;
use lungseg_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lungseg", version, about = "Lung CT segmentation: phantoms, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom corpus with a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// key = value file: train, test_normal, test_covid, seed, dims,
        /// spacing, noise_sigma, lesion_min, lesion_max
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Crop, resample and normalize every case of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key = value file: target_rows, target_cols, hu_low, hu_high,
        /// crop_margin_vox, crop_rule
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the network on the training cases of a prepared directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key = value file with training options
        #[arg(long)]
        config: Option<PathBuf>,
        /// key = value file with network options
        #[arg(long)]
        net_config: Option<PathBuf>,
        /// Training state checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict lung masks for the prepared cases.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also predict the training cases
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Score predictions against the reference masks.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Per-case metrics CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize per-case metrics into cohort tables, box plots and outliers.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<Option<String>> {
    path.map(fs::read_to_string).transpose().map_err(Error::from)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Phantom { out, config } => {
            let cfg = match read_config(config.as_deref())? {
                Some(text) => CorpusConfig::from_text(&text)?,
                None => CorpusConfig::default(),
            };
            let rows = generate_corpus(cfg.counts, cfg.seed, &cfg.phantom, &out)?;
            eprintln!("wrote {} cases to {}", rows.len(), out.display());
        }
        Command::Preprocess { manifest, out, config } => {
            let spec = match read_config(config.as_deref())? {
                Some(text) => preproc_from_text(&text)?,
                None => PreprocSpec::default(),
            };
            let rows = preprocess_manifest(&manifest, &out, &spec)?;
            eprintln!("prepared {} cases in {}", rows.len(), out.display());
        }
        Command::Train { data, out, config, net_config, resume } => {
            let cfg = match read_config(config.as_deref())? {
                Some(text) => TrainConfig::from_text(&text)?,
                None => TrainConfig::default(),
            };
            let net = match read_config(net_config.as_deref())? {
                Some(text) => NetConfig::from_text(&text)?,
                None => NetConfig::default(),
            };
            let outcome = train_from_dir(&data, &out, &cfg, &net, resume.as_deref())?;
            for e in &outcome.report.epochs {
                eprintln!(
                    "epoch {:>3}  train {:.6}  val {:.6}  {:.1}s",
                    e.epoch, e.train_loss, e.val_loss, e.seconds
                );
            }
            if let Some(p) = &outcome.report.checkpoint_path {
                eprintln!("model written to {}", p.display());
            }
        }
        Command::Infer { data, model, out, all, batch_size } => {
            if batch_size == 0 {
                return Err(Error::Config("batch size must be at least 1".into()));
            }
            let params = load_params(&model)?;
            let rows = infer_dir(&data, &params, &out, all, batch_size)?;
            eprintln!("predicted {} cases into {}", rows.len(), out.display());
        }
        Command::Evaluate { data, pred, out } => {
            let cases = evaluate_dir(&data, &pred, &out)?;
            eprintln!("evaluated {} cases into {}", cases.len(), out.display());
        }
        Command::Report { metrics, out } => {
            for w in report_from_csv(&metrics, &out)? {
                eprintln!("warning: {w}");
            }
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
