//! End-to-end runs of the pipeline commands on a tiny population.

use std::fs;
use std::path::Path;

use shapeprior_cli::commands::{
    cmd_eval, cmd_synth, cmd_train, cmd_xval, Selection, CHECKPOINT_FILE, LOSS_FILE, REPORT_JSON,
};
use shapeprior_cli::dataset::read_population;
use shapeprior_cli::manifest::{sha256_file, RunManifest};
use shapeprior_cli::{CliError, RunConfig};

const TINY: &str = r#"
seed = 5
single_thread = true
[population]
n_normal = 6
n_anomalous = 2
dims = [12, 12, 12]
scans_per_subject = 1
[train]
epochs = 4
hidden = 8
latent_dim = 4
lr_theta = 1e-3
lr_latent = 1e-2
[infer]
epochs = 3
lr_latent = 1e-2
[xval]
k = 3
"#;

fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_listed_in_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = cmd_synth(&tiny(), &a).unwrap();
    cmd_synth(&tiny(), &b).unwrap();
    assert_eq!(out.rows.len(), 8);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let manifest = RunManifest::read(&a.join("run_manifest.json")).unwrap();
    assert_eq!(manifest.seed, 5);
    for f in &manifest.outputs {
        assert_eq!(sha256_file(&a.join(&f.path)).unwrap(), f.sha256);
    }
    assert_eq!(read_population(&a).unwrap(), out.rows);
}

#[test]
fn invalid_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let err = RunConfig::parse("[train]\nepochs = 3\nbogus = 1\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let mut cfg = tiny();
    cfg.train.lr_theta = -1.0;
    let err = cmd_synth(&cfg, tmp.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(!tmp.path().join("population.csv").exists());
}

#[test]
fn train_refuses_anomalous_subjects_and_logs_every_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&tiny(), &data).unwrap();

    let bad = Selection::Subjects(vec!["n000".into(), "a000".into()]);
    let err = cmd_train(&tiny(), &data, &bad, &tmp.path().join("bad")).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err}");
    assert!(!tmp.path().join("bad").join(CHECKPOINT_FILE).exists());

    let out = tmp.path().join("train");
    let trained = cmd_train(&tiny(), &data, &Selection::Fold { k: 3, fold: 1 }, &out).unwrap();
    assert_eq!(trained.prior.latents.len(), 4);
    let loss = fs::read_to_string(out.join(LOSS_FILE)).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);
}

#[test]
fn eval_scores_every_test_scan_and_leaves_the_checkpoint_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&tiny(), &data).unwrap();
    let sel = Selection::Fold { k: 3, fold: 2 };
    let trained = cmd_train(&tiny(), &data, &sel, &tmp.path().join("train")).unwrap();
    let before = sha256_file(&trained.checkpoint).unwrap();

    let out = tmp.path().join("eval");
    let eval = cmd_eval(&tiny(), &trained.checkpoint, &trained.latents, &data, &sel, &out).unwrap();
    assert_eq!(sha256_file(&trained.checkpoint).unwrap(), before);
    let report = &eval.summary.anomaly;
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.n_normal_verdicts + report.n_anomalous_verdicts, 4);
    for name in [REPORT_JSON, "report.csv", "scores.csv", "lda.csv", "test_latents.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    let missing = cmd_eval(
        &tiny(),
        &tmp.path().join("nope.inrc"),
        &trained.latents,
        &data,
        &sel,
        &out,
    );
    assert_eq!(missing.unwrap_err().exit_code(), 2);
}

#[test]
fn xval_summarizes_every_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&tiny(), &data).unwrap();
    let out = cmd_xval(&tiny(), &data, &tmp.path().join("xval")).unwrap();
    assert_eq!(out.summary.folds.len(), 3);
    assert_eq!(out.folds.len(), 3);
    assert!(out.summary.pooled.contains_key("test_anomalous"));
    for f in 1..=3 {
        assert!(tmp
            .path()
            .join(format!("xval/fold_{f}/train/{CHECKPOINT_FILE}"))
            .exists());
    }
}
