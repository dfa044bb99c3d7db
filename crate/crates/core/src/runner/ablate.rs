//! Ablation sweeps: one configuration per arm, evaluated under the protocol.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{cmd_distill, cmd_eval, load_train, prepare, render_reports, resolve_runs, Arm};
use crate::config::{ExperimentConfig, OutlierSource};
use crate::data::{init_distilled, load_distilled, save_distilled, DistilledSet};
use crate::error::{Error, Result};
use crate::forge::Corruption;
use crate::ood::OODReport;

const RANDOM_STREAM: u64 = 0x7261_6e64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    OutlierSource,
    SOutSize,
    Ipc,
    RandomVsDistilled,
    SingleSet,
    CorruptionType,
    Lambda,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::OutlierSource,
        Ablation::SOutSize,
        Ablation::Ipc,
        Ablation::RandomVsDistilled,
        Ablation::SingleSet,
        Ablation::CorruptionType,
        Ablation::Lambda,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::OutlierSource => "outlier-source",
            Ablation::SOutSize => "s-out-size",
            Ablation::Ipc => "ipc",
            Ablation::RandomVsDistilled => "random-vs-distilled",
            Ablation::SingleSet => "single-set",
            Ablation::CorruptionType => "corruption-type",
            Ablation::Lambda => "lambda",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Change applied to another arm's distilled sets instead of distilling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostHoc {
    /// Replace `s_out` with a fresh random draw of equal size from `T_out`.
    RandomOutliers { from: usize },
}

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub config: ExperimentConfig,
    pub post: Option<PostHoc>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub reports: Vec<(String, OODReport)>,
    pub failures: Vec<(String, String)>,
    pub summary: PathBuf,
}

fn needs_outliers(cfg: &ExperimentConfig, axis: Ablation) -> Result<()> {
    if cfg.outlier == OutlierSource::None {
        return Err(Error::Config(format!("ablation {axis} needs outlier.mode other than none")));
    }
    Ok(())
}

/// The arms of `axis`, each writing under `output/<axis>/<arm>`.
/// `classes` sizes `S_in` for the s-out-size sweep.
pub fn ablation_arms(cfg: &ExperimentConfig, axis: Ablation, classes: usize) -> Result<Vec<AblationArm>> {
    let root = cfg.output.join(axis.as_str());
    let arm = |name: &str, changes: &[(&str, String)], post: Option<PostHoc>| -> Result<AblationArm> {
        let mut c = cfg.with("output", &root.join(name).to_string_lossy())?;
        for (k, v) in changes {
            c = c.with(k, v)?;
        }
        Ok(AblationArm {
            name: name.to_string(),
            config: c,
            post,
        })
    };
    let mode = |m: OutlierSource| ("outlier.mode", m.as_str().to_string());
    let mut arms = Vec::new();
    match axis {
        Ablation::OutlierSource => {
            arms.push(arm("none", &[mode(OutlierSource::None)], None)?);
            arms.push(arm("gaussian", &[mode(OutlierSource::OeGaussian)], None)?);
            arms.push(arm("uniform", &[mode(OutlierSource::OeUniform)], None)?);
            if cfg.outlier_path.is_some() {
                arms.push(arm("directory", &[mode(OutlierSource::OeDirectory)], None)?);
            }
            arms.push(arm("poe", &[mode(OutlierSource::Poe)], None)?);
        }
        Ablation::SOutSize => {
            needs_outliers(cfg, axis)?;
            let n_in = cfg.distill.ipc * classes;
            for frac in [0.0, 0.5, 1.0, 1.5, 2.0] {
                let size = (frac * n_in as f64).round() as usize;
                arms.push(arm(&format!("s_out-{size}"), &[("distill.outlier_count", size.to_string())], None)?);
            }
        }
        Ablation::Ipc => {
            for ipc in [1, 10, 50] {
                arms.push(arm(&format!("ipc-{ipc}"), &[("distill.ipc", ipc.to_string())], None)?);
            }
        }
        Ablation::RandomVsDistilled => {
            let oe = if cfg.outlier_path.is_some() {
                OutlierSource::OeDirectory
            } else {
                return Err(Error::Config("random-vs-distilled needs outlier.path for the OE arms".into()));
            };
            arms.push(arm("oe-d", &[mode(oe)], None)?);
            arms.push(arm("oe-r", &[mode(oe)], Some(PostHoc::RandomOutliers { from: 0 }))?);
            arms.push(arm("poe-d", &[mode(OutlierSource::Poe)], None)?);
            arms.push(arm("poe-r", &[mode(OutlierSource::Poe)], Some(PostHoc::RandomOutliers { from: 2 }))?);
        }
        Ablation::SingleSet => {
            needs_outliers(cfg, axis)?;
            arms.push(arm("baseline", &[mode(OutlierSource::None)], None)?);
            arms.push(arm("trustdd", &[("distill.method", "dsa".into())], None)?);
            arms.push(arm("single-set", &[("distill.method", "single-set-dsa".into())], None)?);
        }
        Ablation::CorruptionType => {
            if cfg.outlier != OutlierSource::Poe {
                return Err(Error::Config("corruption-type ablation needs outlier.mode poe".into()));
            }
            let mut kinds = vec![Corruption::Jigsaw, Corruption::Invert, Corruption::Mosaic, Corruption::Speckle];
            if cfg.digits {
                kinds.push(Corruption::Flip);
            }
            for k in &kinds {
                arms.push(arm(k.as_str(), &[("outlier.corruptions", k.as_str().to_string())], None)?);
            }
            let all: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
            arms.push(arm("all", &[("outlier.corruptions", all.join(","))], None)?);
        }
        Ablation::Lambda => {
            needs_outliers(cfg, axis)?;
            for l in [0.0, 0.1, 0.3, 0.5, 0.7, 1.0] {
                arms.push(arm(&format!("lambda-{l}"), &[("distill.lambda", l.to_string())], None)?);
            }
        }
    }
    Ok(arms)
}

/// Swaps every run's `s_out` for a random draw of the same size.
pub(super) fn random_outliers(arm: &AblationArm, source_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = &arm.config;
    let p = prepare(cfg)?;
    let mut dirs = Vec::new();
    for (r, dir) in resolve_runs(source_dir)?.iter().enumerate() {
        let distilled = load_distilled(dir)?;
        let fresh = init_distilled(
            &p.train,
            &p.t_out,
            distilled.ipc,
            distilled.s_out_len(),
            cfg.run_seed(r) ^ RANDOM_STREAM,
        )?;
        let set = DistilledSet {
            s_out_images: fresh.s_out_images,
            corruption_assignment: fresh.corruption_assignment,
            config_checksum: Some(cfg.checksum()),
            ..distilled
        };
        let out = super::run_dir(&cfg.output, r);
        save_distilled(&set, &out)?;
        dirs.push(out);
    }
    Ok(dirs)
}

fn run_arm(arm: &AblationArm, arms: &[AblationArm]) -> Result<OODReport> {
    let dirs = match arm.post {
        Some(PostHoc::RandomOutliers { from }) => random_outliers(arm, &arms[from].config.output)?,
        None => cmd_distill(&arm.config)?,
    };
    let runs = dirs.iter().map(|d| load_distilled(d)).collect::<Result<_>>()?;
    let evaluated = Arm {
        name: arm.name.clone(),
        runs,
    };
    let mut reports = cmd_eval(&arm.config, &[evaluated])?;
    Ok(reports.remove(0).1)
}

/// Runs every arm of `axis`. A failing arm is recorded and the sweep goes
/// on; `output/<axis>/summary.txt` tabulates the arms that succeeded.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: Ablation) -> Result<AblationOutcome> {
    cfg.check_paths()?;
    let classes = load_train(cfg)?.num_classes();
    let arms = ablation_arms(cfg, axis, classes)?;
    for a in &arms {
        a.config.check_paths()?;
    }
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for a in &arms {
        log::info!("ablation {axis}: arm {}", a.name);
        match run_arm(a, &arms) {
            Ok(r) => reports.push((a.name.clone(), r)),
            Err(e) => {
                log::error!("ablation {axis}: arm {} failed: {e}", a.name);
                failures.push((a.name.clone(), e.to_string()));
            }
        }
    }
    let root = cfg.output.join(axis.as_str());
    fs::create_dir_all(&root)?;
    let mut text = format!("# ablation={axis}\n# config_checksum={}\n", cfg.checksum());
    text.push_str(&render_reports(&reports, cfg.eval.include_noise)?);
    for (name, err) in &failures {
        text.push_str(&format!("failed arm {name}: {err}\n"));
    }
    let summary = root.join("summary.txt");
    fs::write(&summary, text)?;
    Ok(AblationOutcome {
        reports,
        failures,
        summary,
    })
}
