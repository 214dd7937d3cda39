//! CIFAR-10 binary batch loader: 3073-byte records, one label byte then
//! 3072 pixel bytes in channel-major (R,G,B) planes.

use std::path::Path;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::idx::read_maybe_gzip;
use super::LabeledDataset;

const RECORD_LEN: usize = 3073;
const PIXELS: usize = 3072;

/// Load one or more CIFAR-10 binary batches into an `(N,3,32,32)` dataset
/// in `[0,1]`. Gzip-compressed batches are decompressed transparently.
pub fn load_cifar10<S: Scalar>(batch_paths: &[&Path]) -> Result<LabeledDataset<S>> {
    if batch_paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 batch paths given".into()));
    }
    let scale = 1.0 / 255.0;
    let mut values: Vec<S> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in batch_paths {
        let bytes = read_maybe_gzip(path)?;
        if bytes.len() % RECORD_LEN != 0 {
            return Err(Error::Parse {
                offset: (bytes.len() - bytes.len() % RECORD_LEN) as u64,
                message: format!(
                    "{}: length {} is not a multiple of {RECORD_LEN}",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(RECORD_LEN) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(Error::Parse {
                    offset: (labels.len() * RECORD_LEN) as u64,
                    message: format!("label byte {label} out of range 0..=9"),
                });
            }
            labels.push(label);
            values.extend(record[1..].iter().map(|&b| S::from_f64(f64::from(b) * scale)));
        }
    }
    debug_assert_eq!(values.len(), labels.len() * PIXELS);
    let images = Tensor::from_raw(vec![labels.len(), 3, 32, 32], values);
    LabeledDataset::new("cifar10", images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(PIXELS));
        r
    }

    #[test]
    fn single_record_file_loads_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, record(9, 255)).unwrap();
        let d = load_cifar10::<f32>(&[&path]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.label(0), 9);
        assert_eq!(d.sample_shape(), &[3, 32, 32]);
        assert_eq!(d.sample(0).values()[0], 1.0);
    }

    #[test]
    fn multiple_batches_concatenate() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("b1.bin");
        let p2 = dir.path().join("b2.bin");
        let mut two = record(0, 10);
        two.extend(record(1, 20));
        std::fs::write(&p1, two).unwrap();
        std::fs::write(&p2, record(2, 30)).unwrap();
        let d = load_cifar10::<f64>(&[&p1, &p2]).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels(), &[0, 1, 2]);
    }

    #[test]
    fn bad_length_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = record(0, 1);
        bytes.extend(record(1, 2));
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        match load_cifar10::<f32>(&[&path]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, RECORD_LEN as u64),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }
}
