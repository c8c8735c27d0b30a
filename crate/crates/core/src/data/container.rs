//! `CTEN` series container.
//!
//! Little-endian: magic, `u32` version, `u8` dtype (0 = f32), four `u64`
//! dims `(L,H,W,V)`, `u32` length + UTF-8 JSON metadata, `H·W` mask bytes,
//! then the row-major f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::GridSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"CTEN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Metadata {
    start_time: DateTime<Utc>,
    step_seconds: u64,
    variables: Vec<String>,
}

pub fn write_container(series: &GridSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    series.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let meta = serde_json::to_vec(&Metadata {
        start_time: series.start_time,
        step_seconds: series.step_seconds,
        variables: series.variables.clone(),
    })?;
    let mut header = Vec::with_capacity(64 + meta.len());
    header.extend_from_slice(CONTAINER_MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(DTYPE_F32);
    for &d in series.values.shape() {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    header.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    header.extend_from_slice(&meta);
    header.extend_from_slice(&series.mask);
    w.write_all(&header).map_err(io)?;
    for v in series.values.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `count` little-endian f32 values and rejects trailing bytes.
pub(crate) fn read_f32_payload(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
    let mut raw = Vec::new();
    r.take(bytes as u64 + 1)
        .read_to_end(&mut raw)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    if raw.len() != bytes {
        return Err(Error::Format(format!(
            "payload length mismatch in {what}: expected {bytes} bytes, found {}{}",
            raw.len().min(bytes),
            if raw.len() > bytes { " plus trailing data" } else { "" }
        )));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<GridSeries> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected CTEN")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut dtype = [0u8; 1];
    read_exact(&mut r, &mut dtype, "dtype")?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", dtype[0])));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = usize::try_from(read_u64(&mut r, "dims")?)
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dimensions {dims:?} overflow")))?;
    let meta_len = read_u32(&mut r, "metadata length")? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta, "metadata")?;
    let meta: Metadata = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let cells = dims[1]
        .checked_mul(dims[2])
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let mut mask = vec![0u8; cells];
    read_exact(&mut r, &mut mask, "mask")?;
    let data = read_f32_payload(&mut r, count, "series payload")?;
    let values = Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))?;
    GridSeries::new(values, meta.start_time, meta.step_seconds, meta.variables, mask)
        .map_err(|e| Error::Format(e.to_string()))
}
