use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use patchadapt::data::Dataset;
use patchadapt::error::{Error, Result};
use patchadapt::harness::{
    evaluate, load_train_config, parse_split, train_adapt, train_local, visualize_patches,
    Checkpoint, TrainOutcome,
};

#[derive(Parser)]
#[command(
    name = "patchadapt",
    version,
    about = "Two-stream action recognition with informative-patch selection and adversarial domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-domain moving-sprites dataset.
    GenData {
        /// JSON config file (TrainConfig; the `dataset` section is used).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 1: train the patch-selecting feature extractor on source labels.
    TrainLocal {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// JSON config file.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path (a `<out>.log` JSONL file is written too).
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: freeze the extractor and train the adaptation stack.
    TrainAdapt {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Phase-1 checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// JSON config file.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one domain/split.
    Eval {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which clips to score, as domain/split (e.g. target/val).
        #[arg(long)]
        split: String,
        /// Optional path to write the metrics report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render per-frame patch overlays and crops for chosen clips.
    VisualizePatches {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint providing the trained policy.
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated clip ids.
        #[arg(long)]
        clips: String,
        /// Output directory for .ppm files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_log(path: &PathBuf, outcome: &TrainOutcome) -> Result<()> {
    let log_path = PathBuf::from(format!("{}.log", path.display()));
    let mut text = String::new();
    for line in &outcome.log {
        text.push_str(&serde_json::to_string(line).map_err(|e| Error::data(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_train_config(&config)?;
            let ds = Dataset::generate(&cfg.dataset, &out)?;
            let n: usize = ds.manifest().clips.len();
            println!("generated {n} clips under {}", out.display());
        }
        Cmd::TrainLocal { data, config, out } => {
            let cfg = load_train_config(&config)?;
            let ds = Dataset::open(&data)?;
            let outcome = train_local(&ds, &cfg)?;
            outcome.checkpoint.save(&out)?;
            write_log(&out, &outcome)?;
            if let Some(last) = outcome.log.last() {
                println!("phase 1 done ({} epochs): {last}", outcome.log.len());
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::TrainAdapt { data, init, config, out } => {
            let cfg = load_train_config(&config)?;
            let ds = Dataset::open(&data)?;
            let ckpt = Checkpoint::load(&init)?;
            let outcome = train_adapt(&ds, ckpt, &cfg)?;
            outcome.checkpoint.save(&out)?;
            write_log(&out, &outcome)?;
            if let Some(last) = outcome.log.last() {
                println!("phase 2 done ({} epochs): {last}", outcome.log.len());
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Eval { data, ckpt, split, json } => {
            let (domain, sp) = parse_split(&split)?;
            let ds = Dataset::open(&data)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let report = evaluate(&checkpoint, &ds, domain, sp)?;
            let text =
                serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
            println!("{text}");
            if let Some(path) = json {
                std::fs::write(&path, format!("{text}\n"))?;
            }
        }
        Cmd::VisualizePatches { data, ckpt, clips, out } => {
            let ids: Vec<String> =
                clips.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if ids.is_empty() {
                return Err(Error::invalid_config("--clips must list at least one clip id".to_string()));
            }
            let ds = Dataset::open(&data)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let files = visualize_patches(&checkpoint, &ds, &ids, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
