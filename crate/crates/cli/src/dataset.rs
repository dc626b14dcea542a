//! On-disk population layout: `population.csv` plus one VOXL1 file per scan.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shapeprior::synth::{make_folds, Fold};
use shapeprior::voxel::{read_voxl, Group, VoxelGrid, VoxlRecord};

use crate::{CliError, CliResult};

pub const POPULATION_CSV: &str = "population.csv";
pub const SHAPES_DIR: &str = "shapes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub subject_id: String,
    pub scan_index: u32,
    pub group: Group,
    /// Relative to the population directory.
    pub path: String,
    pub volume_cm3: f64,
}

pub fn read_population(dir: &Path) -> CliResult<Vec<PopulationRow>> {
    let path = dir.join(POPULATION_CSV);
    let f = File::open(&path)
        .map_err(|e| CliError::Usage(format!("cannot open population manifest {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(BufReader::new(f)).deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

/// Loads one scan and checks it against its manifest row.
pub fn load_shape(dir: &Path, row: &PopulationRow) -> CliResult<VoxelGrid> {
    let path = dir.join(&row.path);
    let f = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let grid = match read_voxl(&mut BufReader::new(f))? {
        VoxlRecord::Binary(g) => g,
        VoxlRecord::Prob { .. } => {
            return Err(CliError::Usage(format!(
                "{} holds probabilities, expected a binary grid",
                path.display()
            )))
        }
    };
    if grid.subject_id != row.subject_id || grid.group != row.group {
        return Err(CliError::Usage(format!(
            "{} is labelled {}/{} but the manifest says {}/{}",
            path.display(),
            grid.subject_id,
            grid.group,
            row.subject_id,
            row.group
        )));
    }
    Ok(grid)
}

/// Distinct subjects with their group, in first-appearance order.
pub fn subjects(rows: &[PopulationRow]) -> CliResult<Vec<(String, Group)>> {
    let mut seen: BTreeMap<&str, Group> = BTreeMap::new();
    let mut out = Vec::new();
    for r in rows {
        match seen.get(r.subject_id.as_str()) {
            Some(&g) if g != r.group => {
                return Err(CliError::Usage(format!(
                    "subject {} has scans in groups {g} and {}",
                    r.subject_id, r.group
                )))
            }
            Some(_) => {}
            None => {
                seen.insert(&r.subject_id, r.group);
                out.push((r.subject_id.clone(), r.group));
            }
        }
    }
    Ok(out)
}

/// Fold `fold` (1-based) of the subject-wise `k`-fold plan.
pub fn fold(rows: &[PopulationRow], k: usize, fold: usize, seed: u64) -> CliResult<Fold> {
    if fold == 0 || fold > k {
        return Err(CliError::Usage(format!("fold must be in 1..={k}, got {fold}")));
    }
    let plan = make_folds(&subjects(rows)?, k, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(plan.folds[fold - 1].clone())
}

/// Rows belonging to `subject_ids`, in manifest order.
pub fn rows_for<'a>(rows: &'a [PopulationRow], subject_ids: &[String]) -> CliResult<Vec<&'a PopulationRow>> {
    for id in subject_ids {
        if !rows.iter().any(|r| &r.subject_id == id) {
            return Err(CliError::Usage(format!("subject {id} is not in the population")));
        }
    }
    Ok(rows.iter().filter(|r| subject_ids.contains(&r.subject_id)).collect())
}

/// Subject ids listed one per line; blank lines and `#` comments skipped.
pub fn read_subject_list(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read subject list {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
