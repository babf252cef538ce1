use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use supmix::cli::{self, ExperimentConfig, Overrides};
use supmix::trainer::Variant;

#[derive(Parser)]
#[command(name = "supmix", version, about = "Semi-supervised segmentation experiments on synthetic imbalanced data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct RunFlags {
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list (overrides `seeds`).
    #[arg(long)]
    seeds: Option<String>,
    /// Labeled fraction of the train split (overrides `labeled_ratio`).
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// supervised | fixmatch | unimatch-lite | ours
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a spec TOML.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate every seed of a run directory on the test split.
    Eval {
        run_dir: PathBuf,
        /// Dataset to evaluate on (defaults to the run's dataset).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report path (defaults to `<run_dir>/metrics.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the five ablation presets over all seeds and labeled ratios.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn experiment(config: &PathBuf, flags: &RunFlags) -> supmix::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    Overrides {
        out: flags.out.clone(),
        seeds: flags.seeds.as_deref().map(cli::parse_seeds).transpose()?,
        labeled_ratio: flags.labeled_ratio,
        variant: flags.variant.as_deref().map(Variant::parse).transpose()?,
    }
    .apply(&mut cfg);
    Ok(cfg)
}

fn run(cmd: Cmd) -> supmix::Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let s = cli::cmd_gen_data(&config, &out)?;
            print!("{s}");
            if !s.within_tolerance() {
                return Err(supmix::Error::Invalid("achieved class ratios outside tolerance".into()));
            }
        }
        Cmd::Train { config, flags } => {
            let cfg = experiment(&config, &flags)?;
            let s = cli::cmd_train(&cfg)?;
            for (d, l) in s.seed_dirs.iter().zip(&s.final_losses) {
                println!("{}  final loss {l:.6}", d.display());
            }
        }
        Cmd::Eval { run_dir, manifest, out } => {
            let (path, rows) = cli::cmd_eval(&run_dir, manifest.as_deref(), out.as_deref())?;
            let agg = &rows.last().expect("aggregate row").report;
            for (k, name) in agg.class_names.iter().enumerate() {
                if let (Some(m), Some(s)) = (agg.iou[k], agg.iou_std[k]) {
                    println!("{name:<18} {}", supmix::eval::format_mean_std(m, s));
                }
            }
            if let (Some(m), Some(s)) = (agg.miou, agg.miou_std) {
                println!("{:<18} {}", "mIoU", supmix::eval::format_mean_std(m, s));
            }
            println!("wrote {}", path.display());
        }
        Cmd::Ablate { config, flags } => {
            let cfg = experiment(&config, &flags)?;
            let s = cli::cmd_ablate(&cfg)?;
            print!("{s}");
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
