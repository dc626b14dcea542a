//! `VOXL1` container.
//!
//! ```text
//! "VOXL" | version u8 = 1 | kind u8 (0 binary, 1 prob32)
//! dims: 3 x u32 LE | spacing mm: 3 x f32 LE | group u8
//! subject_id: u32 LE byte length + UTF-8
//! payload, x-fastest: binary = one byte 0/1 per voxel, prob32 = f32 LE per voxel
//! ```

use std::io::{Read, Write};

use super::grid::{Group, ProbGrid, VoxelGrid};
use crate::{Error, Result};

pub const VOXL_MAGIC: &[u8; 4] = b"VOXL";
const VERSION: u8 = 1;
const KIND_BINARY: u8 = 0;
const KIND_PROB32: u8 = 1;

/// A decoded `VOXL1` file.
#[derive(Clone, Debug, PartialEq)]
pub enum VoxlRecord {
    Binary(VoxelGrid),
    Prob {
        grid: ProbGrid,
        subject_id: String,
        group: Group,
    },
}

fn write_header(
    w: &mut impl Write,
    kind: u8,
    dims: [usize; 3],
    spacing: [f32; 3],
    group: Group,
    subject_id: &str,
) -> Result<()> {
    w.write_all(VOXL_MAGIC)?;
    w.write_all(&[VERSION, kind])?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("VOXL1", "dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[group.code()])?;
    let id = subject_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    Ok(())
}

pub fn write_binary(w: &mut impl Write, g: &VoxelGrid) -> Result<()> {
    write_header(w, KIND_BINARY, g.dims(), g.spacing(), g.group, &g.subject_id)?;
    let payload: Vec<u8> = g.occupancy().iter().map(|&o| o as u8).collect();
    w.write_all(&payload)?;
    Ok(())
}

/// Writes probabilities as `f32`; values are rounded to single precision.
pub fn write_prob(w: &mut impl Write, p: &ProbGrid, subject_id: &str, group: Group) -> Result<()> {
    write_header(w, KIND_PROB32, p.dims(), p.spacing(), group, subject_id)?;
    let mut payload = Vec::with_capacity(p.voxel_count() * 4);
    for &v in p.probs() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("VOXL1", format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn read_voxl(r: &mut impl Read) -> Result<VoxlRecord> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != VOXL_MAGIC {
        return Err(Error::format("VOXL1", format!("bad magic {magic:?}")));
    }
    let [version, kind] = read_array::<2>(r)?;
    if version != VERSION {
        return Err(Error::format("VOXL1", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(read_array(r)?) as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = f32::from_le_bytes(read_array(r)?);
    }
    let [code] = read_array::<1>(r)?;
    let group = Group::from_code(code).ok_or_else(|| Error::format("VOXL1", format!("unknown group code {code}")))?;
    let id_len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)
        .map_err(|e| Error::format("VOXL1", format!("truncated subject id: {e}")))?;
    let subject_id = String::from_utf8(id).map_err(|_| Error::format("VOXL1", "subject id is not UTF-8"))?;

    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("VOXL1", "voxel count overflows"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let malformed = |e: Error| Error::format("VOXL1", e.to_string());
    match kind {
        KIND_BINARY => {
            if payload.len() != n {
                return Err(Error::format(
                    "VOXL1",
                    format!("expected {n} payload bytes, got {}", payload.len()),
                ));
            }
            let occ = payload
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::format("VOXL1", format!("binary voxel byte {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let grid = VoxelGrid::new(dims, spacing, occ, subject_id, group).map_err(malformed)?;
            Ok(VoxlRecord::Binary(grid))
        }
        KIND_PROB32 => {
            if payload.len() != n * 4 {
                return Err(Error::format(
                    "VOXL1",
                    format!("expected {} payload bytes, got {}", n * 4, payload.len()),
                ));
            }
            let probs = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let grid = ProbGrid::new(dims, spacing, probs).map_err(malformed)?;
            Ok(VoxlRecord::Prob {
                grid,
                subject_id,
                group,
            })
        }
        other => Err(Error::format("VOXL1", format!("unknown grid kind {other}"))),
    }
}
