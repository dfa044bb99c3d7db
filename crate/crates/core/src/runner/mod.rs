//! Orchestration of distill, evaluate, ablate, forge, grid export and report.

mod ablate;
mod grid;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ablate::{ablation_arms, cmd_ablate, Ablation, AblationArm, AblationOutcome, PostHoc};
pub use grid::{cmd_export_grid, grid_pixels, to_byte};

use crate::config::{ExperimentConfig, OutlierSource, TestOod};
use crate::data::{
    generate_blob_outliers, load_dataset, load_distilled, load_outlier_source, save_distilled, save_unlabeled,
    DatasetSource, DistillMethod, DistilledSet, LabeledImageSet, Split, UnlabeledImageSet,
};
use crate::distill::{run_with_buffer, TelemetrySink};
use crate::error::{Error, Result};
use crate::forge::{noise_outliers, synthesize_outliers, NoiseKind};
use crate::nn::{expert_trajectories, NetworkSpec, TrajectoryBuffer};
use crate::ood::{evaluate_protocol, render_table, OODReport};

/// Stream offsets that keep derived seeds apart from run and model seeds.
const OUTLIER_STREAM: u64 = 0x6f75_746c;
const TEST_NOISE_STREAM: u64 = 0x7465_7374;
const EXPERT_OFFSET: u64 = 500;

/// Training data, training outliers and network for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledImageSet,
    pub t_out: UnlabeledImageSet,
    pub spec: NetworkSpec,
}

pub fn load_train(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let train = load_dataset(&cfg.dataset, Split::Train)?;
    Ok(match cfg.train_per_class {
        Some(n) => train.take_per_class(n),
        None => train,
    })
}

/// Builds `T_out` for `cfg.outlier`.
pub fn build_outliers(cfg: &ExperimentConfig, train: &LabeledImageSet) -> Result<UnlabeledImageSet> {
    let shape = train.shape();
    let count = cfg.outlier_count.unwrap_or(train.len());
    let seed = cfg.seed ^ OUTLIER_STREAM;
    match cfg.outlier {
        OutlierSource::None => Ok(UnlabeledImageSet::empty("none", shape)),
        OutlierSource::Poe => synthesize_outliers(train, &cfg.corruption, count),
        OutlierSource::OeGaussian => noise_outliers(NoiseKind::Gaussian, shape, count, seed),
        OutlierSource::OeUniform => noise_outliers(NoiseKind::Uniform, shape, count, seed),
        OutlierSource::OeDirectory => {
            let path = cfg
                .outlier_path
                .as_ref()
                .ok_or_else(|| Error::Config("outlier.mode oe-directory needs outlier.path".into()))?;
            let all = load_outlier_source(path, shape)?;
            if cfg.outlier_count.is_none() || count >= all.len() {
                return Ok(all);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = index::sample(&mut rng, all.len(), count).into_vec();
            rows.sort_unstable();
            Ok(all.subset(&rows))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let train = load_train(cfg)?;
    let t_out = build_outliers(cfg, &train)?;
    let spec = cfg.network_spec(train.num_classes(), train.shape());
    spec.validate()?;
    Ok(Prepared { train, t_out, spec })
}

/// The InD test split and every configured test OOD set.
pub fn load_test_sets(cfg: &ExperimentConfig) -> Result<(LabeledImageSet, Vec<UnlabeledImageSet>)> {
    let test = load_dataset(&cfg.dataset, Split::Test)?;
    let shape = test.shape();
    let mut oods = Vec::with_capacity(cfg.eval.test_oods.len());
    for (j, t) in cfg.eval.test_oods.iter().enumerate() {
        let set = match t {
            TestOod::Path(p) => load_outlier_source(p, shape)?,
            TestOod::Noise(kind) => {
                let seed = cfg.seed.wrapping_mul(1000) ^ TEST_NOISE_STREAM ^ j as u64;
                noise_outliers(*kind, shape, test.len(), seed)?
            }
            TestOod::Blobs(opts) => {
                let base = match &cfg.dataset {
                    DatasetSource::Blobs(b) => b.clone(),
                    DatasetSource::MnistDir(_) => Default::default(),
                };
                let set = generate_blob_outliers(&base.with_options(opts)?, Split::Test)?;
                set.ensure_shape(shape)?;
                set
            }
        };
        oods.push(set);
    }
    Ok((test, oods))
}

/// Keeps freed buffers inside the process heap. Training allocates and
/// drops patch matrices of tens of megabytes every step; with glibc's
/// defaults each one is a fresh mapping whose pages fault in zeroed.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Runs `f` on a local pool of `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Internal(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn run_dir(output: &Path, r: usize) -> PathBuf {
    output.join(format!("run{r}"))
}

/// Writes the normalized config next to the artifacts.
fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output)?;
    let text = format!("# config_checksum={}\n{}", cfg.checksum(), cfg.canonical());
    fs::write(cfg.output.join("config.txt"), text)?;
    Ok(())
}

/// Expert buffers for MTT: the configured one, or freshly trained experts
/// under `output/experts`.
fn expert_buffers(cfg: &ExperimentConfig, p: &Prepared) -> Result<Vec<TrajectoryBuffer>> {
    if let Some(path) = &cfg.distill.mtt.buffer_path {
        return Ok(vec![TrajectoryBuffer::load(path)?]);
    }
    (0..cfg.expert_runs)
        .into_par_iter()
        .map(|e| {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(EXPERT_OFFSET + e as u64);
            let buf = expert_trajectories(&p.train, &p.t_out, &p.spec, &cfg.expert, seed)?;
            buf.save(&cfg.output.join("experts").join(format!("expert{e}")))?;
            Ok(buf)
        })
        .collect()
}

/// Distills `cfg.runs` sets into `output/run{r}`, each with telemetry.
pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.check_paths()?;
    let p = prepare(cfg)?;
    cmd_distill_prepared(cfg, &p)
}

pub fn cmd_distill_prepared(cfg: &ExperimentConfig, p: &Prepared) -> Result<Vec<PathBuf>> {
    write_config(cfg)?;
    let checksum = cfg.checksum();
    with_workers(cfg.effective_workers(), || {
        let buffers = match cfg.distill.method {
            DistillMethod::Mtt => expert_buffers(cfg, p)?,
            _ => Vec::new(),
        };
        (0..cfg.runs)
            .into_par_iter()
            .map(|r| {
                distill_run(cfg, p, buffers.get(r % buffers.len().max(1)), r, &checksum)
                    .map_err(|e| Error::Run { run: r, source: Box::new(e) })
            })
            .collect()
    })?
}

fn distill_run(
    cfg: &ExperimentConfig,
    p: &Prepared,
    buffer: Option<&TrajectoryBuffer>,
    r: usize,
    checksum: &str,
) -> Result<PathBuf> {
    let dir = run_dir(&cfg.output, r);
    fs::create_dir_all(&dir)?;
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = cfg.run_seed(r);
    let mut sink = TelemetrySink::to_file(&dir.join("telemetry.csv"), Some(checksum))?;
    let mut set = run_with_buffer(&p.train, &p.t_out, &p.spec, &dcfg, buffer, &mut sink)?;
    set.config_checksum = Some(checksum.to_string());
    save_distilled(&set, &dir)?;
    log::info!("run {r}: distilled set written to {}", dir.display());
    Ok(dir)
}

/// A container directory, or a directory whose `run{r}` children are.
pub fn resolve_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("manifest").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::Load {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let r = name.strip_prefix("run")?.parse().ok()?;
            e.path().join("manifest").exists().then(|| (r, e.path()))
        })
        .collect();
    if runs.is_empty() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: "no distilled-set container found".into(),
        });
    }
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

/// One evaluated arm: a name and its distilled runs.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub runs: Vec<DistilledSet>,
}

impl Arm {
    pub fn load(name: &str, dir: &Path) -> Result<Self> {
        let runs = resolve_runs(dir)?
            .iter()
            .map(|d| load_distilled(d))
            .collect::<Result<_>>()?;
        Ok(Arm { name: name.to_string(), runs })
    }
}

/// Evaluates every arm under the protocol and writes `report_<arm>.kv` plus
/// `report.txt` into `cfg.output`.
pub fn cmd_eval(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<Vec<(String, OODReport)>> {
    cfg.check_paths()?;
    if cfg.eval.test_oods.is_empty() {
        return Err(Error::Config("eval.test_ood lists no OOD test sets".into()));
    }
    let (test, oods) = load_test_sets(cfg)?;
    let spec = cfg.network_spec(test.num_classes(), test.shape());
    for arm in arms {
        for s in &arm.runs {
            if s.shape() != spec.input || s.num_classes != spec.num_classes {
                return Err(Error::Config(format!(
                    "arm `{}` holds {} images with {} classes, network expects {}",
                    arm.name,
                    s.shape(),
                    s.num_classes,
                    spec
                )));
            }
        }
    }
    let checksum = cfg.checksum();
    let mut reports = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut report = evaluate_protocol(&arm.runs, &spec, &test, &oods, &cfg.protocol())?;
        report.config_checksum = Some(checksum.clone());
        reports.push((arm.name.clone(), report));
    }
    write_reports(&cfg.output, &reports, cfg.eval.include_noise)?;
    Ok(reports)
}

/// Key-value file per arm and one text table per score.
pub fn write_reports(dir: &Path, reports: &[(String, OODReport)], include_noise: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, r) in reports {
        fs::write(dir.join(format!("report_{name}.kv")), r.to_key_values(name))?;
    }
    fs::write(dir.join("report.txt"), render_reports(reports, include_noise)?)?;
    Ok(())
}

pub fn render_reports(reports: &[(String, OODReport)], include_noise: bool) -> Result<String> {
    let Some((_, first)) = reports.first() else {
        return Ok(String::new());
    };
    let arms: Vec<(&str, &OODReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let mut text = String::new();
    for &score in &first.scores {
        text.push_str(&format!("score: {score}\n"));
        text.push_str(&render_table(&arms, score, include_noise)?);
        text.push('\n');
    }
    Ok(text)
}

/// Re-renders saved `report_<arm>.kv` files.
pub fn cmd_report(files: &[PathBuf], include_noise: bool) -> Result<String> {
    let reports = files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| Error::Load {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            OODReport::from_key_values(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    render_reports(&reports, include_noise)
}

/// Forges `count` pseudo-outliers from the training set into `out`.
pub fn cmd_forge(cfg: &ExperimentConfig, count: usize, out: &Path) -> Result<UnlabeledImageSet> {
    cfg.check_paths()?;
    let train = load_train(cfg)?;
    let set = synthesize_outliers(&train, &cfg.corruption, count)?;
    save_unlabeled(&set, out, Some(&cfg.checksum()))?;
    Ok(set)
}
