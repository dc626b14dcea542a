use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use shapeprior::anomaly::{
    best_linear_separation, calibrate_threshold, lda_fit_with, lda_project, own_class_containment, select_shrinkage,
    AnomalyReport, LdaProjection, LinearSeparation, ShapeScore, ShrinkageSelection, SHRINKAGE_GRID,
};
use shapeprior::infer::{infer_latent, InferConfig};
use shapeprior::prior::{read_checkpoint, read_latent_table, write_latent_table, LatentCode, LatentEntry, ShapeKey};
use shapeprior::voxel::{volume_cm3, Group};

use super::train::write_with;
use super::{ensure_dir, Selection};
use crate::config::LdaShrinkage;
use crate::dataset::{self, load_shape, read_population, rows_for};
use crate::manifest::{write_json, RunManifest};
use crate::svg::{lda_scatter, ScatterPoint};
use crate::{CliError, CliResult, RunConfig};

pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TEST_LATENTS_FILE: &str = "test_latents.csv";
pub const LDA_CSV: &str = "lda.csv";
pub const LDA_JSON: &str = "lda.json";
pub const LDA_SVG: &str = "lda.svg";

/// How the projected latents of the test set sit relative to the training
/// clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSeparation {
    /// Best half-plane between all projected training latents and the
    /// projected anomalous test latents; absent without anomalous shapes.
    pub anomalous_vs_train: Option<LinearSeparation>,
    /// Fraction of normal test latents inside the convex hull of their own
    /// group's training latents.
    pub normal_test_in_hull: Option<f64>,
    pub n_normal_test: usize,
    pub n_anomalous_test: usize,
    /// Present when the LDA shrinkage was selected automatically.
    pub shrinkage_selection: Option<ShrinkageSelection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub anomaly: AnomalyReport,
    pub latent_separation: Option<LatentSeparation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaRow {
    pub subject_id: String,
    pub group: Group,
    pub u: f64,
    pub v: f64,
    pub scan_index: u32,
    /// `train` or `test`.
    pub split: String,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub lda: Option<LdaProjection>,
    pub lda_rows: Vec<LdaRow>,
    pub test_latents: Vec<LatentEntry>,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    subject_id: &'a str,
    scan_index: u32,
    group: Group,
    dice: f64,
    vol_err_cm3: f64,
    vol_err_pct: Option<f64>,
    final_loss: f64,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    subject_id: &'a str,
    scan_index: u32,
    group: Group,
    dice: f64,
    vol_err_cm3: f64,
    vol_err_pct: Option<f64>,
    verdict: shapeprior::anomaly::Verdict,
    threshold: f64,
}

/// Encodes every selected test scan with the frozen prior, scores it, and
/// projects train and test latents with a discriminant fitted on the
/// training latents' group labels.
///
/// The threshold is the configured percentile of the held-out normal scans'
/// Dice scores.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    train_latents: &Path,
    data: &Path,
    selection: &Selection,
    out: &Path,
) -> CliResult<EvalOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let f = File::open(checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot open checkpoint {}: {e}", checkpoint.display())))?;
    let (model, _meta) = read_checkpoint(&mut BufReader::new(f))?;
    let f = File::open(train_latents)
        .map_err(|e| CliError::Usage(format!("cannot open latent table {}: {e}", train_latents.display())))?;
    let train_table = read_latent_table(&mut BufReader::new(f))?;

    let rows = read_population(data)?;
    let test_ids = match selection {
        Selection::Fold { k, fold } => dataset::fold(&rows, *k, *fold, cfg.seed)?.test,
        Selection::Subjects(ids) => ids.clone(),
    };
    let test_rows = rows_for(&rows, &test_ids)?;
    if test_rows.is_empty() {
        return Err(CliError::Usage("test set is empty".into()));
    }
    if let Some(e) = train_table.iter().find(|e| test_ids.contains(&e.key.subject_id)) {
        return Err(CliError::Usage(format!(
            "test subject {} also appears in the training latents",
            e.key
        )));
    }

    let base = cfg.infer_config();
    let mut scores = Vec::with_capacity(test_rows.len());
    let mut test_latents = Vec::with_capacity(test_rows.len());
    for (i, r) in test_rows.iter().enumerate() {
        let grid = load_shape(data, r)?;
        let icfg = InferConfig {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let res = infer_latent(&model, &grid, &icfg)?;
        log::info!(
            "{}#{} ({}): dice {:.4}, final loss {:.5}",
            r.subject_id,
            r.scan_index,
            r.group,
            res.dice_vs_input,
            res.final_loss
        );
        scores.push(ShapeScore {
            subject_id: r.subject_id.clone(),
            scan_index: r.scan_index,
            group: r.group,
            dice: res.dice_vs_input,
            volume_cm3: volume_cm3(&grid),
            vol_err_cm3: res.vol_err.cm3,
            vol_err_pct: res.vol_err.pct,
            final_loss: res.final_loss,
        });
        test_latents.push(LatentEntry {
            key: ShapeKey::new(r.subject_id.clone(), r.scan_index),
            group: r.group,
            z: res.z,
        });
    }

    let normal_dice: Vec<f64> = scores
        .iter()
        .filter(|s| !s.group.is_anomalous())
        .map(|s| s.dice)
        .collect();
    let threshold = calibrate_threshold(&normal_dice, cfg.eval.quantile)
        .map_err(|e| CliError::Usage(format!("threshold calibration needs >= 2 held-out normal scans: {e}")))?;
    let report = AnomalyReport::new(scores, threshold, cfg.eval.quantile)?;

    let (lda, lda_rows, latent_separation) = match project_latents(cfg, &train_table, &test_latents) {
        Ok((p, rows, sep)) => (Some(p), rows, Some(sep)),
        Err(e) => {
            log::warn!("skipping latent projection: {e}");
            (None, Vec::new(), None)
        }
    };
    let summary = EvalSummary {
        anomaly: report,
        latent_separation,
    };

    ensure_dir(out)?;
    let mut outputs = Vec::new();
    let path = out.join(SCORES_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &summary.anomaly.records {
        let s = &r.score;
        w.serialize(ScoreRow {
            subject_id: &s.subject_id,
            scan_index: s.scan_index,
            group: s.group,
            dice: s.dice,
            vol_err_cm3: s.vol_err_cm3,
            vol_err_pct: s.vol_err_pct,
            final_loss: s.final_loss,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    outputs.push(path);

    let path = out.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &summary.anomaly.records {
        let s = &r.score;
        w.serialize(ReportRow {
            subject_id: &s.subject_id,
            scan_index: s.scan_index,
            group: s.group,
            dice: s.dice,
            vol_err_cm3: s.vol_err_cm3,
            vol_err_pct: s.vol_err_pct,
            verdict: r.verdict,
            threshold,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    outputs.push(path);

    let path = out.join(REPORT_JSON);
    write_json(&path, &summary)?;
    outputs.push(path);

    let path = out.join(TEST_LATENTS_FILE);
    write_with(&path, |w| Ok(write_latent_table(w, &test_latents)?))?;
    outputs.push(path);

    if let Some(p) = &lda {
        let path = out.join(LDA_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        for r in &lda_rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        outputs.push(path);
        let path = out.join(LDA_JSON);
        write_json(&path, p)?;
        outputs.push(path);
        if cfg.eval.svg {
            if let Some(path) = write_svg(out, &lda_rows) {
                outputs.push(path);
            }
        }
    }

    let manifest = RunManifest::write(out, "eval", cfg, &[checkpoint, train_latents, data], &outputs, started)?;
    Ok(EvalOutput {
        summary,
        lda,
        lda_rows,
        test_latents,
        manifest,
    })
}

fn project_latents(
    cfg: &RunConfig,
    train: &[LatentEntry],
    test: &[LatentEntry],
) -> CliResult<(LdaProjection, Vec<LdaRow>, LatentSeparation)> {
    let zs: Vec<LatentCode> = train.iter().map(|e| e.z.clone()).collect();
    let labels: Vec<Group> = train.iter().map(|e| e.group).collect();
    let (shrinkage, selection) = match cfg.eval.lda_shrinkage {
        LdaShrinkage::Fixed(s) => (s, None),
        LdaShrinkage::Auto(_) => {
            let subjects: Vec<String> = train.iter().map(|e| e.key.subject_id.clone()).collect();
            let sel = select_shrinkage(&zs, &labels, &subjects, &SHRINKAGE_GRID)?;
            log::info!("selected relative LDA shrinkage {}", sel.shrinkage);
            (sel.shrinkage, Some(sel))
        }
    };
    let p = lda_fit_with(&zs, &labels, shrinkage)?;

    let mut rows = Vec::with_capacity(train.len() + test.len());
    for (e, pt) in train.iter().zip(&p.points) {
        rows.push(row(e, *pt, "train"));
    }
    let mut test_points = Vec::with_capacity(test.len());
    for e in test {
        let pt = lda_project(&p, &e.z)?;
        test_points.push(pt);
        rows.push(row(e, pt, "test"));
    }

    let anomalous: Vec<[f64; 2]> = test
        .iter()
        .zip(&test_points)
        .filter(|(e, _)| e.group.is_anomalous())
        .map(|(_, pt)| *pt)
        .collect();
    let anomalous_vs_train = if anomalous.is_empty() {
        None
    } else {
        Some(best_linear_separation(
            &p.points,
            &anomalous,
            cfg.eval.separation_directions,
        )?)
    };

    let normal_test: Vec<(Group, [f64; 2])> = test
        .iter()
        .zip(&test_points)
        .filter(|(e, _)| !e.group.is_anomalous())
        .map(|(e, pt)| (e.group, *pt))
        .collect();
    let sep = LatentSeparation {
        anomalous_vs_train,
        normal_test_in_hull: own_class_containment(&p, &labels, &normal_test)?,
        n_normal_test: normal_test.len(),
        n_anomalous_test: anomalous.len(),
        shrinkage_selection: selection,
    };
    Ok((p, rows, sep))
}

fn row(e: &LatentEntry, pt: [f64; 2], split: &str) -> LdaRow {
    LdaRow {
        subject_id: e.key.subject_id.clone(),
        group: e.group,
        u: pt[0],
        v: pt[1],
        scan_index: e.key.scan_index,
        split: split.to_string(),
    }
}

/// Best effort: a failed plot is logged and otherwise ignored.
fn write_svg(out: &Path, rows: &[LdaRow]) -> Option<PathBuf> {
    let points: Vec<ScatterPoint> = rows
        .iter()
        .map(|r| ScatterPoint {
            group: r.group,
            test: r.split == "test",
            xy: [r.u, r.v],
        })
        .collect();
    let path = out.join(LDA_SVG);
    match std::fs::write(&path, lda_scatter(&points)) {
        Ok(()) => Some(path),
        Err(e) => {
            log::warn!("could not write {}: {e}", path.display());
            None
        }
    }
}
