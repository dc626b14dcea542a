use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, RunConfig};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputFile>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// Hashes `outputs` (paths inside `dir`) and writes the manifest there.
    pub fn write(
        dir: &Path,
        command: &str,
        cfg: &RunConfig,
        inputs: &[&Path],
        outputs: &[PathBuf],
        started: Instant,
    ) -> CliResult<RunManifest> {
        let mut files = Vec::with_capacity(outputs.len());
        for p in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            files.push(OutputFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(p)?,
                bytes: fs::metadata(p).map_err(|e| CliError::io(p, e))?.len(),
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: files,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> CliResult<RunManifest> {
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_reader(io::BufReader::new(f))?)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    io::copy(&mut f, &mut hasher).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}
