//! Tile checkpoints: `b"NPCK"`, version (u32), header length (u64), a JSON
//! header (field config, sub-field centroids, video ids, dtype and the
//! ordered tensor directory), then every tensor's little-endian payload in
//! directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldConfig, TileField};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    /// Lossless for the in-memory parameters.
    #[default]
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: FieldConfig,
    centroids: Vec<Vec3>,
    video_ids: Vec<u32>,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(tile: &TileField, dtype: Dtype) -> Vec<u8> {
    let params = tile.params();
    let header = Header {
        config: tile.config.clone(),
        centroids: tile.centroids(),
        video_ids: tile.embeddings.ids.clone(),
        dtype,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let payload: usize = params.iter().map(|p| p.data.len()).sum::<usize>() * dtype.size();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &params {
        for &v in p.data {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8], what: &str) -> Result<TileField> {
    let fail = |m: String| Error::format(what, m);
    if bytes.len() < 16 {
        return Err(fail("truncated header".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| fail(format!("header: {e}")))?;
    let mut tile = TileField::zeros(header.config, &header.centroids, &header.video_ids)?;
    let size = header.dtype.size();
    let mut cursor = 16 + hlen;
    {
        let params = tile.params_mut();
        if params.len() != header.tensors.len() {
            return Err(fail("tensor directory does not match the field config".into()));
        }
        for (p, entry) in params.into_iter().zip(&header.tensors) {
            if p.name != entry.name || p.shape != entry.shape {
                return Err(fail(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, p.name, p.shape
                )));
            }
            let n = p.data.len() * size;
            let raw = bytes
                .get(cursor..cursor + n)
                .ok_or_else(|| fail(format!("truncated tensor {}", entry.name)))?;
            for (v, c) in p.data.iter_mut().zip(raw.chunks_exact(size)) {
                *v = match header.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                };
            }
            cursor += n;
        }
    }
    if cursor != bytes.len() {
        return Err(fail("trailing bytes after last tensor".into()));
    }
    Ok(tile)
}

pub fn save_checkpoint(tile: &TileField, path: &Path, dtype: Dtype) -> Result<()> {
    fs::write(path, write_checkpoint(tile, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TileField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, &path.display().to_string())
}
