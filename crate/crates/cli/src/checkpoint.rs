//! Flat binary parameter container: the magic `BSRCKPT1`, a manifest of
//! `(name, shape, offset)` entries with length-prefixed UTF-8 names, then
//! each tensor's raw little-endian 64-bit payload. Round-trips are bit-exact.

use std::path::Path;

use bsr_core::tape::ParamSet;
use bsr_core::vit::{ViTConfig, ViTModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{write_file, CliError};

pub const MAGIC: &[u8; 8] = b"BSRCKPT1";

/// One manifest entry plus its payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes every parameter in iteration order.
pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let entries: Vec<(&str, &[usize], &[f64])> =
        params.iter().map(|(_, e)| (e.name.as_str(), &e.shape[..], &e.data[..])).collect();

    let mut manifest_len = 8 + 4;
    for (name, shape, _) in &entries {
        manifest_len += 4 + name.len() + 4 + 8 * shape.len() + 8;
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, entries.len() as u32);
    let mut offset = manifest_len as u64;
    for (name, shape, data) in &entries {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, shape.len() as u32);
        for &dim in *shape {
            push_u64(&mut out, dim as u64);
        }
        push_u64(&mut out, offset);
        offset += 8 * data.len() as u64;
    }
    debug_assert_eq!(out.len(), manifest_len);
    for (_, _, data) in &entries {
        for &v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Validation(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}",
                self.at
            ))
        })?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, validating the magic, manifest offsets and total
/// length.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<CheckpointEntry>, CliError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(CliError::Validation(String::from(
            "not a checkpoint: bad magic (expected BSRCKPT1)",
        )));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CliError::Validation(String::from("checkpoint name is not UTF-8")))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let manifest_end = r.at;

    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = manifest_end;
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(CliError::Validation(format!(
                "checkpoint entry {name}: offset {offset} does not follow the previous payload \
                 (expected {expected_offset})"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        expected_offset = offset + 8 * numel;
        entries.push(CheckpointEntry { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(CliError::Validation(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(entries)
}

/// Copies checkpoint payloads into `params`. Every checkpoint tensor must
/// exist in `params` with a matching shape, and vice versa.
pub fn apply(params: &mut ParamSet, entries: &[CheckpointEntry]) -> Result<(), CliError> {
    if entries.len() != params.len() {
        return Err(CliError::Validation(format!(
            "checkpoint holds {} tensors but the model has {}",
            entries.len(),
            params.len()
        )));
    }
    for entry in entries {
        let id = params.find(&entry.name).ok_or_else(|| {
            CliError::Validation(format!("checkpoint tensor {} is not in the model", entry.name))
        })?;
        if params.shape(id) != entry.shape.as_slice() {
            return Err(CliError::Validation(format!(
                "checkpoint tensor {}: shape {:?} does not match the model's {:?}",
                entry.name,
                entry.shape,
                params.shape(id)
            )));
        }
        params.data_mut(id).copy_from_slice(&entry.data);
    }
    Ok(())
}

/// Like [`apply`], but tolerates model parameters absent from the
/// checkpoint when they belong to side blocks (`side*` names), which start
/// fresh when a plain backbone checkpoint feeds the residual baseline.
pub fn apply_backbone(params: &mut ParamSet, entries: &[CheckpointEntry]) -> Result<(), CliError> {
    let mut covered = vec![false; params.len()];
    for entry in entries {
        let id = params.find(&entry.name).ok_or_else(|| {
            CliError::Validation(format!("checkpoint tensor {} is not in the model", entry.name))
        })?;
        if params.shape(id) != entry.shape.as_slice() {
            return Err(CliError::Validation(format!(
                "checkpoint tensor {}: shape {:?} does not match the model's {:?}",
                entry.name,
                entry.shape,
                params.shape(id)
            )));
        }
        covered[id.0] = true;
        params.data_mut(id).copy_from_slice(&entry.data);
    }
    for (id, entry) in params.iter() {
        if !covered[id.0] && !entry.name.starts_with("side") {
            return Err(CliError::Validation(format!(
                "checkpoint is missing tensor {}",
                entry.name
            )));
        }
    }
    Ok(())
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CliError> {
    write_file(path, &to_bytes(params))
}

/// Builds a model for `config` (with side blocks at `side_at`, if any),
/// seeds fresh side parameters from `seed`, and loads `path`'s parameters
/// into the backbone.
pub fn load_model(
    config: &ViTConfig,
    side_at: &[usize],
    seed: u64,
    path: &Path,
) -> Result<ViTModel, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let entries = from_bytes(&bytes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = if side_at.is_empty() {
        ViTModel::new(config, &mut rng)?
    } else {
        ViTModel::with_side_blocks(config, side_at, &mut rng)?
    };
    apply_backbone(&mut model.params, &entries)?;
    Ok(model)
}
