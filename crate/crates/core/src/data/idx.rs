//! IDX file parsing (the MNIST distribution format).
//!
//! Big-endian headers, magic 0x00000803 for image files and 0x00000801 for
//! label files. Gzip-compressed files are decompressed transparently.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::LabeledDataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Read a file fully, decompressing when it starts with the gzip magic.
pub(super) fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        return Ok(out);
    }
    Ok(raw)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: wanted {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse an IDX image file into `(count, rows, cols, pixel bytes)`.
fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32_be("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = cur.u32_be("image count")? as usize;
    let rows = cur.u32_be("row count")? as usize;
    let cols = cur.u32_be("column count")? as usize;
    let pixels = cur.take(n * rows * cols, "pixel data")?;
    Ok((n, rows, cols, pixels))
}

/// Parse an IDX label file into label bytes.
fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32_be("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = cur.u32_be("label count")? as usize;
    cur.take(n, "label data")
}

/// Load an MNIST-format image/label file pair. Pixels come out in `[0,1]`
/// (byte / 255), images shaped `(N,1,rows,cols)`.
pub fn load_mnist<S: Scalar>(image_path: &Path, label_path: &Path) -> Result<LabeledDataset<S>> {
    let image_bytes = read_maybe_gzip(image_path)?;
    let (n, rows, cols, pixels) = parse_images(&image_bytes)?;
    let label_bytes = read_maybe_gzip(label_path)?;
    let labels = parse_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Length {
            expected: n,
            actual: labels.len(),
            context: format!(
                "label count in {} vs image count in {}",
                label_path.display(),
                image_path.display()
            ),
        });
    }
    let scale = 1.0 / 255.0;
    let values: Vec<S> = pixels
        .iter()
        .map(|&b| S::from_f64(f64::from(b) * scale))
        .collect();
    let images = Tensor::from_raw(vec![n, 1, rows, cols], values);
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let id = image_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mnist".to_string());
    LabeledDataset::new(id, images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&n.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(pixels);
        std::fs::write(path, bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_a_crafted_pair_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        // Two 2x2 images; second has a fully saturated pixel.
        write_idx_images(&img, 2, 2, 2, &[0, 51, 102, 153, 255, 0, 0, 0]);
        write_idx_labels(&lbl, &[3, 9]);
        let d = load_mnist::<f64>(&img, &lbl).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[1, 2, 2]);
        assert_eq!(d.labels(), &[3, 9]);
        // Byte 255 maps to exactly 1.0.
        assert_eq!(d.sample(1).values()[0], 1.0);
        assert!((d.sample(0).values()[1] - 51.0 / 255.0).abs() < 1e-15);
        assert!(d.images().values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        // Header claims 2 images but only one is present.
        write_idx_images(&img, 2, 2, 2, &[0; 4]);
        write_idx_labels(&lbl, &[0, 1]);
        let err = load_mnist::<f32>(&img, &lbl).unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 16);
                assert!(message.contains("pixel data"), "{message}");
            }
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, 0x0000_0804u32.to_be_bytes()).unwrap();
        write_idx_labels(&lbl, &[0]);
        assert!(matches!(
            load_mnist::<f32>(&img, &lbl),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn count_mismatch_between_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        write_idx_images(&img, 1, 2, 2, &[0; 4]);
        write_idx_labels(&lbl, &[0, 1]);
        assert!(matches!(
            load_mnist::<f32>(&img, &lbl),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn gzip_files_load_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lbl = dir.path().join("lbl.gz");

        let mut plain = Vec::new();
        plain.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        plain.extend_from_slice(&1u32.to_be_bytes());
        plain.extend_from_slice(&2u32.to_be_bytes());
        plain.extend_from_slice(&2u32.to_be_bytes());
        plain.extend_from_slice(&[255, 0, 128, 64]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&plain).unwrap();
        std::fs::write(&img, enc.finish().unwrap()).unwrap();

        let mut plain = Vec::new();
        plain.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        plain.extend_from_slice(&1u32.to_be_bytes());
        plain.push(7);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&plain).unwrap();
        std::fs::write(&lbl, enc.finish().unwrap()).unwrap();

        let d = load_mnist::<f32>(&img, &lbl).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.label(0), 7);
        assert_eq!(d.sample(0).values()[0], 1.0);
    }
}
