//! Command-line front end for the inspection pipeline. All logic lives in
//! the library; this binary parses arguments, loads configs, and maps
//! errors to exit codes (0 success, 1 usage/config error, 2 runtime
//! failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crackscan::data::{stratified_split, synth_dataset, SampleManifest};
use crackscan::pipeline::{
    eval_command, explain_command, run_pipeline, train_classifier, train_segmenter,
    PipelineConfig, TrainOptions,
};
use crackscan::Error;

#[derive(Parser)]
#[command(
    name = "crackscan",
    version,
    about = "Two-stage tunnel-lining crack inspection: classify, segment, explain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set output.seg_threshold=0.6
    /// (repeatable; the key names the TOML path).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> crackscan::Result<PipelineConfig> {
        PipelineConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (images, exact masks, manifest).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images (even indices crack, odd background).
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Square plate extent in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Assign stratified train/val/test splits to a manifest.
    Split {
        /// Input manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest path (defaults to rewriting in place).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated train,val,test ratios.
        #[arg(long, default_value = "0.7,0.2,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the stage-one classifier on a manifest's train split.
    TrainCls {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Training output directory (weights + loss curves).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Shuffle seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the stage-two segmenter on a manifest's crack train images.
    TrainSeg {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the two-stage pipeline over every record of a manifest.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate both stages on a manifest's test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Emit heatmaps and overlays for one image.
    Explain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Image to explain.
        #[arg(long)]
        image: PathBuf,
    },
    /// Write a default pipeline config file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Use the desk-scale toy model sizes.
        #[arg(long)]
        toy: bool,
    },
}

fn parse_ratios(text: &str) -> crackscan::Result<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "ratios must be three comma-separated numbers, got {text:?}"
        )));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad ratio {s:?}")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn run(command: Command) -> crackscan::Result<()> {
    match command {
        Command::Synth { out, count, size, seed } => {
            let manifest = synth_dataset(&out, count, size, seed)?;
            println!(
                "wrote {} images to {} (manifest.tsv included)",
                manifest.records.len(),
                out.display()
            );
        }
        Command::Split { manifest, out, ratios, seed } => {
            let input = SampleManifest::load(&manifest)?;
            let split = stratified_split(&input, parse_ratios(&ratios)?, seed)?;
            let target = out.unwrap_or(manifest);
            split.save(&target)?;
            println!("wrote split manifest to {}", target.display());
        }
        Command::TrainCls { config, manifest, out, epochs, batch_size, seed } => {
            let cfg = config.load()?;
            let manifest = SampleManifest::load(&manifest)?;
            let opts = TrainOptions {
                epochs,
                batch_size,
                seed,
                ..TrainOptions::classifier_defaults(&out)
            };
            let outcome = train_classifier(&manifest, &cfg.classifier.model, &opts)?;
            println!(
                "trained {} epochs; best val loss {:.6} at epoch {}; weights: {}",
                outcome.log.len(),
                outcome.best_val_loss,
                outcome.best_epoch,
                outcome.weights_path.display()
            );
        }
        Command::TrainSeg { config, manifest, out, epochs, batch_size, seed } => {
            let cfg = config.load()?;
            let manifest = SampleManifest::load(&manifest)?;
            let opts = TrainOptions {
                epochs,
                batch_size,
                seed,
                ..TrainOptions::segmenter_defaults(&out)
            };
            let outcome = train_segmenter(&manifest, &cfg.segmenter.model, &opts)?;
            println!(
                "trained {} epochs; best val loss {:.6} at epoch {}; weights: {}",
                outcome.log.len(),
                outcome.best_val_loss,
                outcome.best_epoch,
                outcome.weights_path.display()
            );
        }
        Command::Run { config, manifest } => {
            let cfg = config.load()?;
            let manifest = SampleManifest::load(&manifest)?;
            let report = run_pipeline(&cfg, &manifest)?;
            println!(
                "processed {} records: {} crack, {} background, {} failed",
                report.records.len(),
                report.crack_routed,
                report.background_routed,
                report.failed
            );
            if let Some(seg) = &report.segmentation {
                println!(
                    "segmentation micro IoU {:.4}, detection rate {:.4}",
                    seg.micro.iou, seg.detection_rate
                );
            }
        }
        Command::Eval { config, manifest } => {
            let cfg = config.load()?;
            let manifest = SampleManifest::load(&manifest)?;
            let report = eval_command(&cfg, &manifest)?;
            println!(
                "classification accuracy {:.4} at {:.2} fps over {} test images",
                report.classification.accuracy,
                report.classification.timing.fps,
                report.classification.test_images
            );
            if let Some(seg) = &report.segmentation {
                println!(
                    "segmentation micro IoU {:.4} / macro IoU {:.4}, detection rate {:.4}",
                    seg.micro.iou, seg.macro_mean.iou, seg.detection_rate
                );
            }
        }
        Command::Explain { config, image } => {
            let cfg = config.load()?;
            let paths = explain_command(&cfg, &image)?;
            for p in paths {
                println!("{p}");
            }
        }
        Command::InitConfig { out, toy } => {
            let cfg = if toy { PipelineConfig::toy() } else { PipelineConfig::default() };
            cfg.save(&out)?;
            println!("wrote config to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Manifest(_)
                | Error::Empty(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
