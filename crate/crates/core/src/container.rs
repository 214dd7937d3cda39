//! Binary container shared by model checkpoints and FIM/ratio vectors.
//!
//! Layout (little-endian): magic `DCLN`, format version `u32`,
//! length-prefixed UTF-8 JSON descriptor (`u32` length), value count `u64`,
//! then raw IEEE-754 values in flat-index order. The descriptor always
//! carries a `precision` tag (`"f32"`/`"f64"`) identifying the value width.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::autodiff::{Precision, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCLN";
pub const FORMAT_VERSION: u32 = 1;

/// Write `values` under a JSON descriptor. The `precision` key is set (or
/// overwritten) from `S`.
pub fn write<S: Scalar>(path: &Path, descriptor: Value, values: &[S]) -> Result<()> {
    let mut descriptor = descriptor;
    match &mut descriptor {
        Value::Object(map) => {
            map.insert(
                "precision".to_string(),
                Value::String(S::PRECISION.tag().to_string()),
            );
        }
        _ => {
            return Err(Error::Format(
                "container descriptor must be a JSON object".into(),
            ))
        }
    }
    let desc_bytes = serde_json::to_vec(&descriptor)
        .map_err(|e| Error::Format(format!("descriptor serialization: {e}")))?;

    let mut out = Vec::with_capacity(20 + desc_bytes.len() + values.len() * S::BYTE_WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc_bytes);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        v.write_le(&mut out);
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A parsed container, values still raw.
pub struct RawContainer {
    pub descriptor: Value,
    pub precision: Precision,
    count: u64,
    payload: Vec<u8>,
}

impl RawContainer {
    pub fn count(&self) -> usize {
        self.count as usize
    }

    /// Decode the payload at the container's stored precision.
    pub fn values<S: Scalar>(&self) -> Result<Vec<S>> {
        if S::PRECISION != self.precision {
            return Err(Error::Format(format!(
                "container holds {} values, requested {}",
                self.precision.tag(),
                S::PRECISION.tag()
            )));
        }
        Ok(self
            .payload
            .chunks_exact(S::BYTE_WIDTH)
            .map(S::read_le)
            .collect())
    }
}

pub fn read(path: &Path) -> Result<RawContainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format(format!(
            "bad magic header in {}",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let desc_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let descriptor: Value = serde_json::from_slice(take(&mut pos, desc_len)?)
        .map_err(|e| Error::Format(format!("bad descriptor JSON: {e}")))?;
    let precision = descriptor
        .get("precision")
        .and_then(|v| v.as_str())
        .and_then(Precision::from_tag)
        .ok_or_else(|| Error::Format("descriptor missing precision tag".into()))?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let payload = take(&mut pos, count as usize * width)?.to_vec();
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok(RawContainer {
        descriptor,
        precision,
        count,
        payload,
    })
}
