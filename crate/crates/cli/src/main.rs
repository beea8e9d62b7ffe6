use std::path::PathBuf;
use std::process::ExitCode;

use aenet::commands::{self, EvalOptions, Grid, ImageSource, SynthOptions};
use aenet::config::RunConfig;
use aenet::error::{CliError, CliResult};
use aenet::manifest::Split;
use aenet::synth::SynthConfig;
use aenet_core::metrics::Aggregation;
use clap::{Parser, Subcommand, ValueEnum};

/// Nuclei segmentation with attention-enforced networks.
#[derive(Parser)]
#[command(name = "aenet", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set modules.sam=false`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Images processed concurrently.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dataset root (`data.root`).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Run directory (`data.output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of elliptical nuclei to the dataset root.
    Synth {
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        validation: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        min_nuclei: usize,
        #[arg(long, default_value_t = 8)]
        max_nuclei: usize,
        #[arg(long, default_value_t = 3.0)]
        min_radius: f64,
        #[arg(long, default_value_t = 8.0)]
        max_radius: f64,
        #[arg(long, default_value_t = 12.0)]
        noise: f64,
    },
    /// Rasterize annotations, plan augmentation, compute normalization statistics.
    Prep,
    /// Train on the prepared dataset.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment a split of the prepared dataset or a directory of images.
    Infer {
        /// Defaults to the best (or last) checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "images", default_value = "same_organ")]
        split: String,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Defaults to `<output>/infer/<split or directory name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Defaults to `<output>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AggregationArg::Micro)]
        aggregation: AggregationArg,
        /// Allow ground-truth masks without a matching prediction.
        #[arg(long)]
        subset: bool,
        #[arg(long)]
        min_f1: Option<f64>,
        #[arg(long)]
        min_dice: Option<f64>,
        #[arg(long)]
        min_miou: Option<f64>,
    },
    /// Module and normalization ablation tables.
    Ablate {
        #[arg(long, value_enum, default_value_t = GridArg::Both)]
        grid: GridArg,
        #[arg(long, default_value = "same_organ")]
        split: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Micro,
    Macro,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Modules,
    Normalization,
    Both,
}

fn config(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let quote = |p: &PathBuf| toml::Value::String(p.display().to_string()).to_string();
    if let Some(r) = &cli.root {
        overrides.push(format!("data.root={}", quote(r)));
    }
    if let Some(o) = &cli.output {
        overrides.push(format!("data.output={}", quote(o)));
    }
    overrides.extend(cli.overrides.iter().cloned());
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Synth {
            train,
            validation,
            test,
            size,
            min_nuclei,
            max_nuclei,
            min_radius,
            max_radius,
            noise,
        } => {
            let opts = SynthOptions {
                config: SynthConfig {
                    size: *size,
                    min_nuclei: *min_nuclei,
                    max_nuclei: *max_nuclei,
                    min_radius: *min_radius,
                    max_radius: *max_radius,
                    noise: *noise,
                },
                train: *train,
                validation: *validation,
                test: *test,
            };
            if *size == 0 || min_radius > max_radius || min_nuclei > max_nuclei || *noise < 0.0 {
                return Err(CliError::Usage(
                    "invalid synthetic dataset parameters".into(),
                ));
            }
            commands::synth(&cfg.data.root, cfg.seed, &opts)?;
            println!(
                "wrote {} images to {}",
                train + validation + test,
                cfg.data.root.display()
            );
        }
        Command::Prep => {
            let s = commands::prep(&cfg)?;
            println!(
                "{} images; {} training images, {} after flips/rotations, {} after zoom",
                s.images, s.train, s.stage1, s.stage2
            );
        }
        Command::Train { resume } => {
            let s = commands::train(&cfg, resume.as_deref())?;
            let best = s.best_val_dice.map_or("-".into(), |d| format!("{d:.4}"));
            println!(
                "{} steps over {} epochs, best validation dice {best}",
                s.steps,
                s.epochs.len()
            );
        }
        Command::Infer {
            checkpoint,
            split,
            images,
            out,
        } => {
            let (source, name) = match images {
                Some(dir) => {
                    let name = dir
                        .file_name()
                        .map_or("images".into(), |n| n.to_string_lossy().into_owned());
                    (ImageSource::Dir(dir.clone()), name)
                }
                None => {
                    let split: Split = split.parse()?;
                    (ImageSource::Split(split), split.to_string())
                }
            };
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| commands::default_checkpoint(&cfg));
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.data.output.join("infer").join(name));
            let records = commands::infer(&cfg, &ck, &source, &out)?;
            println!("segmented {} images into {}", records.len(), out.display());
        }
        Command::Eval {
            pred,
            gt,
            out,
            aggregation,
            subset,
            min_f1,
            min_dice,
            min_miou,
        } => {
            let opts = EvalOptions {
                aggregation: match aggregation {
                    AggregationArg::Micro => Aggregation::Micro,
                    AggregationArg::Macro => Aggregation::Macro,
                },
                subset: *subset,
                min_f1: *min_f1,
                min_dice: *min_dice,
                min_miou: *min_miou,
            };
            let out = out.clone().unwrap_or_else(|| cfg.data.output.join("eval"));
            let s = commands::eval(pred, gt, &out, &opts)?;
            let a = s.aggregate;
            println!(
                "{} images: F1 {:.4} dice {:.4} mIoU {:.4} precision {:.4} recall {:.4}",
                s.per_image.len(),
                a.f1,
                a.dice,
                a.miou,
                a.precision,
                a.recall
            );
        }
        Command::Ablate { grid, split } => {
            let grids: &[Grid] = match grid {
                GridArg::Modules => &[Grid::Modules],
                GridArg::Normalization => &[Grid::Normalization],
                GridArg::Both => &[Grid::Modules, Grid::Normalization],
            };
            for table in commands::ablate(&cfg, grids, split.parse()?)? {
                println!("{}", table.render());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
