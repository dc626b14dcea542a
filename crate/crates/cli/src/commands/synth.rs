use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use shapeprior::synth::generate_population;
use shapeprior::voxel::{volume_cm3, write_binary};

use super::ensure_dir;
use crate::dataset::{PopulationRow, POPULATION_CSV, SHAPES_DIR};
use crate::manifest::RunManifest;
use crate::{CliError, CliResult, RunConfig};

#[derive(Debug)]
pub struct SynthOutput {
    pub rows: Vec<PopulationRow>,
    pub manifest: RunManifest,
}

/// Generates the configured population into `out`.
///
/// All shapes are generated in memory first, so an invalid specification
/// leaves no files behind.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<SynthOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let spec = cfg.population_spec();
    let members = generate_population(&spec).map_err(|e| CliError::Usage(format!("population: {e}")))?;
    log::info!("generated {} scans", members.len());

    ensure_dir(&out.join(SHAPES_DIR))?;
    let mut rows = Vec::with_capacity(members.len());
    let mut outputs: Vec<PathBuf> = Vec::with_capacity(members.len() + 1);
    for m in &members {
        let rel = format!("{SHAPES_DIR}/{}_scan{}.voxl", m.subject_id, m.scan_index);
        let path = out.join(&rel);
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_binary(&mut w, &m.grid)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        rows.push(PopulationRow {
            subject_id: m.subject_id.clone(),
            scan_index: m.scan_index,
            group: m.grid.group,
            path: rel,
            volume_cm3: volume_cm3(&m.grid),
        });
        outputs.push(path);
    }
    let csv_path = out.join(POPULATION_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    outputs.push(csv_path);
    let manifest = RunManifest::write(out, "synth", cfg, &[], &outputs, started)?;
    Ok(SynthOutput { rows, manifest })
}
