use std::path::Path;

use trustdd::config::ExperimentConfig;
use trustdd::data::{load_distilled, DistilledSet};
use trustdd::runner::{self, Arm};

fn tiny(dir: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "dataset.source = blobs:classes=2,count=48,size=8,seed=3\n\
         network.depth = 1\n\
         network.width = 4\n\
         distill.ipc = 2\n\
         distill.iterations = 3\n\
         eval.models_per_run = 1\n\
         eval.epochs = 3\n\
         runs = 2\n\
         output = out\n\
         eval.test_ood = blobs:layout=corners\n{extra}"
    );
    ExperimentConfig::parse(&text, dir).unwrap()
}

fn distill(cfg: &ExperimentConfig) -> Vec<DistilledSet> {
    runner::cmd_distill(cfg).unwrap().iter().map(|d| load_distilled(d).unwrap()).collect()
}

#[test]
fn distillation_is_reproducible_and_runs_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = distill(&tiny(a.path(), ""));
    let second = distill(&tiny(b.path(), ""));
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].s_in_images, second[0].s_in_images);
    assert_eq!(first[1].s_out_images, second[1].s_out_images);
    assert_ne!(first[0].s_in_images, first[1].s_in_images);
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let one = distill(&tiny(a.path(), "workers = 1\n"));
    let many = distill(&tiny(b.path(), "workers = 4\n"));
    assert_eq!(one[1].s_in_images, many[1].s_in_images);
}

#[test]
fn containers_carry_the_config_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "");
    let runs = distill(&cfg);
    assert!(runs.iter().all(|s| s.config_checksum.as_deref() == Some(cfg.checksum().as_str())));
    let reports = runner::cmd_eval(&cfg, &[Arm { name: "poe".into(), runs }]).unwrap();
    assert_eq!(reports[0].1.config_checksum.as_deref(), Some(cfg.checksum().as_str()));
    assert!(tmp.path().join("out/report_poe.kv").is_file());
}

#[test]
fn trajectory_matching_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "distill.method = mtt\n\
                 distill.inner_steps = 1\n\
                 mtt.expert_steps = 2\n\
                 expert.epochs = 2\n\
                 expert.snapshot_interval = 1\n";
    let cfg = tiny(tmp.path(), extra).with("runs", "1").unwrap();
    let runs = distill(&cfg);
    assert_eq!(runs.len(), 1);
    assert!(runs[0].s_in_images.iter().all(|v| v.is_finite()));
    let reports = runner::cmd_eval(&cfg, &[Arm { name: "mtt".into(), runs }]).unwrap();
    assert!(reports[0].1.ind_accuracy.is_finite());
}
