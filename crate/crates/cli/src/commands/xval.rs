use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use shapeprior::anomaly::{calibrate_threshold, LinearSeparation};

use super::{cmd_eval, cmd_train, ensure_dir, EvalOutput, Selection};
use crate::manifest::{write_json, RunManifest};
use crate::{CliError, CliResult, RunConfig};

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Group keys of the per-fold Dice distributions.
pub const TEST_NORMAL: &str = "test_normal";
pub const TEST_ANOMALOUS: &str = "test_anomalous";

/// Five-number summary plus mean of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<BoxStats> {
        let (&first, _) = values.split_first()?;
        let q = |p: f64| {
            if values.len() < 2 {
                Ok(first)
            } else {
                calibrate_threshold(values, p)
            }
        };
        Some(BoxStats {
            n: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            q1: q(25.0).ok()?,
            median: q(50.0).ok()?,
            q3: q(75.0).ok()?,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub volume_auc: Option<f64>,
    pub dice: BTreeMap<String, BoxStats>,
    pub anomalous_vs_train: Option<LinearSeparation>,
    pub normal_test_in_hull: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvalSummary {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    /// Dice distributions pooled over all folds.
    pub pooled: BTreeMap<String, BoxStats>,
}

#[derive(Debug)]
pub struct XvalOutput {
    pub summary: XvalSummary,
    pub folds: Vec<EvalOutput>,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    fold: String,
    group: &'a str,
    n: usize,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    mean: f64,
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

fn run_fold(cfg: &RunConfig, data: &Path, out: &Path, fold: usize) -> CliResult<EvalOutput> {
    let selection = Selection::Fold { k: cfg.xval.k, fold };
    let dir = fold_dir(out, fold);
    log::info!("fold {fold}/{}: training", cfg.xval.k);
    let trained = cmd_train(cfg, data, &selection, &dir.join("train"))?;
    log::info!("fold {fold}/{}: evaluating", cfg.xval.k);
    cmd_eval(
        cfg,
        &trained.checkpoint,
        &trained.latents,
        data,
        &selection,
        &dir.join("eval"),
    )
}

/// Trains and evaluates every fold, then summarizes held-out Dice per group.
///
/// Folds run on separate threads unless `single_thread` is set; each fold is
/// deterministic on its own, so the outputs do not depend on the mode.
pub fn cmd_xval(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<XvalOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let k = cfg.xval.k;
    ensure_dir(out)?;
    let workers = if cfg.single_thread {
        1
    } else {
        thread::available_parallelism().map_or(1, |n| n.get()).min(k)
    };
    let mut evals = Vec::with_capacity(k);
    if workers <= 1 {
        for fold in 1..=k {
            evals.push(run_fold(cfg, data, out, fold)?);
        }
    } else {
        let folds: Vec<usize> = (1..=k).collect();
        for chunk in folds.chunks(workers) {
            let results: Vec<CliResult<EvalOutput>> = thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&fold| s.spawn(move || run_fold(cfg, data, out, fold)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(CliError::Runtime("fold worker panicked".into())))
                    })
                    .collect()
            });
            for r in results {
                evals.push(r?);
            }
        }
    }

    let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut folds = Vec::with_capacity(k);
    for (i, e) in evals.iter().enumerate() {
        let mut per_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &e.summary.anomaly.records {
            let key = if r.score.group.is_anomalous() {
                TEST_ANOMALOUS
            } else {
                TEST_NORMAL
            };
            per_group.entry(key).or_default().push(r.score.dice);
            pooled.entry(key).or_default().push(r.score.dice);
        }
        let sep = e.summary.latent_separation.as_ref();
        folds.push(FoldResult {
            fold: i + 1,
            threshold: e.summary.anomaly.threshold,
            auc: e.summary.anomaly.auc,
            volume_auc: e.summary.anomaly.volume_auc,
            dice: per_group
                .iter()
                .filter_map(|(g, v)| Some((g.to_string(), BoxStats::of(v)?)))
                .collect(),
            anomalous_vs_train: sep.and_then(|s| s.anomalous_vs_train),
            normal_test_in_hull: sep.and_then(|s| s.normal_test_in_hull),
        });
    }
    let summary = XvalSummary {
        k,
        folds,
        pooled: pooled
            .iter()
            .filter_map(|(g, v)| Some((g.to_string(), BoxStats::of(v)?)))
            .collect(),
    };

    let json = out.join(SUMMARY_JSON);
    write_json(&json, &summary)?;
    let csv_path = out.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    let fold_rows = summary
        .folds
        .iter()
        .flat_map(|f| f.dice.iter().map(move |(g, b)| (f.fold.to_string(), g, b)));
    let pooled_rows = summary.pooled.iter().map(|(g, b)| ("all".to_string(), g, b));
    for (fold, group, b) in fold_rows.chain(pooled_rows) {
        w.serialize(SummaryRow {
            fold,
            group,
            n: b.n,
            min: b.min,
            q1: b.q1,
            median: b.median,
            q3: b.q3,
            max: b.max,
            mean: b.mean,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let manifest = RunManifest::write(out, "xval", cfg, &[data], &[json, csv_path], started)?;
    Ok(XvalOutput {
        summary,
        folds: evals,
        manifest,
    })
}
