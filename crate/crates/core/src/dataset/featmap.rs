//! Raw float image format: 16-byte header (`b"FEAT"`, H, W, D as u32) then
//! `H·W·D` little-endian f32 values in row, column, channel order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: u32, width: u32, dim: u32) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height as usize * width as usize * dim as usize],
        }
    }

    pub fn pixel(&self, row: u32, col: u32) -> &[f32] {
        let d = self.dim as usize;
        let start = (row as usize * self.width as usize + col as usize) * d;
        &self.data[start..start + d]
    }

    pub fn pixel_mut(&mut self, row: u32, col: u32) -> &mut [f32] {
        let d = self.dim as usize;
        let start = (row as usize * self.width as usize + col as usize) * d;
        &mut self.data[start..start + d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let (height, width, dim) = parse_header(bytes, what)?;
        let count = height as usize * width as usize * dim as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 4 {
            return Err(Error::format(
                what,
                format!("expected {} payload bytes, found {}", count * 4, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(bytes: &[u8], what: &str) -> Result<(u32, u32, u32)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(what, "truncated header"));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(what, "bad magic"));
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    Ok((u(4), u(8), u(12)))
}

/// Reads only the `(H, W, D)` header; used for eager manifest validation.
pub fn read_header(path: &Path) -> Result<(u32, u32, u32)> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    parse_header(&buf, &path.display().to_string())
}
