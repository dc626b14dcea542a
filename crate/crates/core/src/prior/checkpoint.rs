//! `INRC1` checkpoints and latent tables.
//!
//! A checkpoint is a UTF-8 `key=value` header, terminated by a line `end`,
//! followed by every parameter as little-endian `f32` in layer order (each
//! layer: weights row-major `fan_in x fan_out`, then bias).
//!
//! Latent tables are CSV: `subject_id,scan_index,group,z0,...,z{d-1}`, with
//! values printed in shortest round-trip form.

use std::io::{BufRead, Write};

use super::model::{Architecture, LatentCode, ShapeKey, ShapePriorModel};
use crate::tensor::Activation;
use crate::voxel::Group;
use crate::{Error, Result};

const MAGIC_LINE: &str = "INRC1";
const FORMAT_VERSION: u32 = 1;

/// Training settings stored next to the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub ce_weight: f64,
    pub lambda: f64,
    pub seed: u64,
}

pub fn write_checkpoint(w: &mut impl Write, model: &ShapePriorModel, meta: &CheckpointMeta) -> Result<()> {
    let arch = model.architecture();
    let shapes = arch
        .layer_shapes()
        .iter()
        .map(|(i, o)| format!("{i}x{o}"))
        .collect::<Vec<_>>()
        .join(",");
    let acts = arch
        .activations()
        .iter()
        .map(|a| a.name())
        .collect::<Vec<_>>()
        .join(",");
    let skip = arch.skip_after.map_or("none".to_string(), |s| s.to_string());
    let header = format!(
        "{MAGIC_LINE}\nversion={FORMAT_VERSION}\nlatent_dim={}\nhidden={}\nlayers={}\nskip_after={skip}\n\
         layer_shapes={shapes}\nactivations={acts}\nce_weight={}\nlambda={}\nseed={}\nparam_count={}\n\
         param_dtype=f32le\nend\n",
        arch.latent_dim,
        arch.hidden,
        arch.layers,
        meta.ce_weight,
        meta.lambda,
        meta.seed,
        arch.param_count(),
    );
    w.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(model.params().len() * 4);
    for p in model.params() {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("INRC1", reason)
}

pub fn read_checkpoint(r: &mut impl BufRead) -> Result<(ShapePriorModel, CheckpointMeta)> {
    let mut fields = Vec::new();
    let mut first = true;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header not terminated"));
        }
        let line = line.trim_end_matches('\n');
        if first {
            if line != MAGIC_LINE {
                return Err(bad(format!("bad magic line '{line}'")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("header line '{line}'")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing header field '{key}'")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| bad(format!("field '{key}' = '{v}'")))
    }
    let version: u32 = num("version", get("version")?)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let skip = get("skip_after")?;
    let arch = Architecture {
        latent_dim: num("latent_dim", get("latent_dim")?)?,
        hidden: num("hidden", get("hidden")?)?,
        layers: num("layers", get("layers")?)?,
        skip_after: if skip == "none" {
            None
        } else {
            Some(num("skip_after", skip)?)
        },
    };
    arch.validate().map_err(|e| bad(e.to_string()))?;
    let shapes = arch
        .layer_shapes()
        .iter()
        .map(|(i, o)| format!("{i}x{o}"))
        .collect::<Vec<_>>()
        .join(",");
    if get("layer_shapes")? != shapes {
        return Err(bad("layer_shapes disagree with the architecture"));
    }
    for (declared, expected) in get("activations")?.split(',').zip(arch.activations()) {
        if Activation::parse(declared) != Some(expected) {
            return Err(bad(format!("unsupported activation '{declared}'")));
        }
    }
    if get("param_dtype")? != "f32le" {
        return Err(bad("param_dtype must be f32le"));
    }
    let count: usize = num("param_count", get("param_count")?)?;
    if count != arch.param_count() {
        return Err(bad(format!("param_count {count} != {}", arch.param_count())));
    }
    let meta = CheckpointMeta {
        ce_weight: num("ce_weight", get("ce_weight")?)?,
        lambda: num("lambda", get("lambda")?)?,
        seed: num("seed", get("seed")?)?,
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, got {}",
            count * 4,
            payload.len()
        )));
    }
    let params = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let model = ShapePriorModel::from_params(arch, params).map_err(|e| bad(e.to_string()))?;
    Ok((model, meta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentEntry {
    pub key: ShapeKey,
    pub group: Group,
    pub z: LatentCode,
}

pub fn write_latent_table(w: &mut impl Write, entries: &[LatentEntry]) -> Result<()> {
    let d = entries.first().map_or(0, |e| e.z.dim());
    let mut out = String::from("subject_id,scan_index,group");
    for i in 0..d {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for e in entries {
        if e.key.subject_id.contains([',', '\n', '"']) {
            return Err(Error::contract(format!(
                "subject id '{}' is not CSV-safe",
                e.key.subject_id
            )));
        }
        if e.z.dim() != d {
            return Err(Error::contract("latent table rows must share one dimension"));
        }
        out.push_str(&format!("{},{},{}", e.key.subject_id, e.key.scan_index, e.group));
        for v in e.z.as_slice() {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_latent_table(r: &mut impl BufRead) -> Result<Vec<LatentEntry>> {
    let bad = |reason: String| Error::format("latent table", reason);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["subject_id", "scan_index", "group"] {
        return Err(bad(format!("unexpected header '{header}'")));
    }
    let d = cols.len() - 3;
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d + 3 {
            return Err(bad(format!(
                "row {} has {} columns, expected {}",
                n + 1,
                parts.len(),
                d + 3
            )));
        }
        let scan_index = parts[1]
            .parse()
            .map_err(|_| bad(format!("row {}: scan_index '{}'", n + 1, parts[1])))?;
        let group: Group = parts[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let z = parts[3..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("row {}: value '{s}'", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        entries.push(LatentEntry {
            key: ShapeKey::new(parts[0], scan_index),
            group,
            z: LatentCode::new(z)?,
        });
    }
    Ok(entries)
}
