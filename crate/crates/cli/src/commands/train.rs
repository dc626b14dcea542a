use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use shapeprior::prior::{write_checkpoint, write_latent_table, CheckpointMeta, ShapeKey};
use shapeprior::train::{train_with_progress, TrainedPrior, TrainingShape};

use super::{ensure_dir, Selection};
use crate::dataset::{self, load_shape, read_population, rows_for};
use crate::manifest::{write_json, RunManifest};
use crate::{CliError, CliResult, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.inrc";
pub const LATENTS_FILE: &str = "latents.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug)]
pub struct TrainOutput {
    pub prior: TrainedPrior,
    pub checkpoint: PathBuf,
    pub latents: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Serialize)]
struct Split<'a> {
    train: &'a [String],
    test: &'a [String],
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    mean_soft_dice: f64,
    mean_ce: f64,
    mean_latent_reg: f64,
    mean_total: f64,
}

/// Trains the prior on the selected subjects, all of which must be normal.
pub fn cmd_train(cfg: &RunConfig, data: &Path, selection: &Selection, out: &Path) -> CliResult<TrainOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let rows = read_population(data)?;
    let (train_ids, test_ids) = match selection {
        Selection::Fold { k, fold } => {
            let f = dataset::fold(&rows, *k, *fold, cfg.seed)?;
            (f.train, f.test)
        }
        Selection::Subjects(ids) => (ids.clone(), Vec::new()),
    };
    if train_ids.is_empty() {
        return Err(CliError::Usage("training set is empty".into()));
    }
    let selected = rows_for(&rows, &train_ids)?;
    if let Some(r) = selected.iter().find(|r| r.group.is_anomalous()) {
        return Err(CliError::Usage(format!(
            "refusing to train: subject {} belongs to group {}",
            r.subject_id, r.group
        )));
    }
    let mut shapes = Vec::with_capacity(selected.len());
    for r in &selected {
        shapes.push(TrainingShape {
            key: ShapeKey::new(r.subject_id.clone(), r.scan_index),
            grid: load_shape(data, r)?,
        });
    }
    let tc = cfg.train_config();
    log::info!(
        "training on {} scans of {} subjects for {} epochs",
        shapes.len(),
        train_ids.len(),
        tc.epochs
    );
    let prior = train_with_progress(&shapes, &tc, |s, _| {
        if s.epoch % 25 == 0 || s.epoch + 1 == tc.epochs {
            log::info!(
                "epoch {:>5}: loss {:.5} (soft dice {:.5}, ce {:.5})",
                s.epoch,
                s.mean.total,
                s.mean.soft_dice,
                s.mean.cross_entropy
            );
        }
        ControlFlow::Continue(())
    })?;

    ensure_dir(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        ce_weight: tc.ce_weight,
        lambda: tc.lambda,
        seed: tc.seed,
    };
    write_with(&checkpoint, |w| Ok(write_checkpoint(w, &prior.model, &meta)?))?;
    let latents = out.join(LATENTS_FILE);
    write_with(&latents, |w| Ok(write_latent_table(w, &prior.latents)?))?;

    let loss = out.join(LOSS_FILE);
    let mut w = csv::Writer::from_path(&loss)?;
    for s in &prior.history {
        w.serialize(LossRow {
            epoch: s.epoch,
            mean_soft_dice: s.mean.soft_dice,
            mean_ce: s.mean.cross_entropy,
            mean_latent_reg: s.mean.latent_reg,
            mean_total: s.mean.total,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&loss, e))?;
    let split = out.join(SPLIT_FILE);
    write_json(
        &split,
        &Split {
            train: &train_ids,
            test: &test_ids,
        },
    )?;

    let outputs = [checkpoint.clone(), latents.clone(), loss, split];
    let manifest = RunManifest::write(out, "train", cfg, &[data], &outputs, started)?;
    Ok(TrainOutput {
        prior,
        checkpoint,
        latents,
        manifest,
    })
}

pub(crate) fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}
