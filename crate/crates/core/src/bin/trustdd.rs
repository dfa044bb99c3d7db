//! Command-line driver: distill, evaluate, ablate, forge, export grids and
//! re-render reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trustdd::config::ExperimentConfig;
use trustdd::error::{Error, Result};
use trustdd::runner::{self, Ablation, Arm};

#[derive(Parser)]
#[command(name = "trustdd", version, about = "Dataset distillation with OOD detection")]
struct Cli {
    /// Experiment config (flat `key = value` lines with dotted sections).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill `runs` sets into `output/run{r}`.
    Distill,
    /// Train on distilled sets and score OOD detection.
    Eval {
        /// Arm to evaluate as `name=dir`; dir is a run or a parent of `run{r}`.
        #[arg(long = "arm", value_name = "NAME=DIR", required = true)]
        arms: Vec<String>,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long, value_name = "AXIS")]
        axis: Ablation,
    },
    /// Write pseudo-outliers forged from the training set.
    Forge {
        #[arg(long)]
        count: usize,
        /// Comma-separated corruption names.
        #[arg(long)]
        corruptions: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile a distilled set into a PPM image.
    ExportGrid { dir: PathBuf, out: PathBuf },
    /// Re-render saved `report_<arm>.kv` files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Count noise test sets in the mean row.
        #[arg(long)]
        include_noise: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::parse("", &std::env::current_dir()?)?,
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg = cfg.with(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn parse_arm(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), dir.into())),
        _ => Err(Error::Config(format!("arm `{spec}` is not NAME=DIR"))),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Distill => {
            let cfg = load_config(&cli)?;
            for dir in runner::cmd_distill(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval { arms } => {
            let cfg = load_config(&cli)?;
            let arms = arms
                .iter()
                .map(|a| parse_arm(a).and_then(|(name, dir)| Arm::load(&name, &dir)))
                .collect::<Result<Vec<_>>>()?;
            let reports = runner::cmd_eval(&cfg, &arms)?;
            print!("{}", runner::render_reports(&reports, cfg.eval.include_noise)?);
        }
        Command::Ablate { axis } => {
            let cfg = load_config(&cli)?;
            let outcome = runner::cmd_ablate(&cfg, *axis)?;
            print!("{}", std::fs::read_to_string(&outcome.summary)?);
            return Ok(outcome.failures.is_empty());
        }
        Command::Forge {
            count,
            corruptions,
            seed,
            out,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(c) = corruptions {
                cfg = cfg.with("outlier.corruptions", c)?;
            }
            if let Some(s) = seed {
                cfg = cfg.with("seed", &s.to_string())?;
            }
            let set = runner::cmd_forge(&cfg, *count, out)?;
            println!("{} pseudo-outliers in {}", set.len(), out.display());
        }
        Command::ExportGrid { dir, out } => {
            runner::cmd_export_grid(dir, out)?;
            println!("{}", out.display());
        }
        Command::Report { files, include_noise } => {
            print!("{}", runner::cmd_report(files, *include_noise)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    runner::tune_allocator();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more arms failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
