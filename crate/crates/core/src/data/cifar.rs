//! CIFAR-10 binary batches: records of one label byte followed by 32x32
//! pixels for the red, green and blue planes in turn, each row-major.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::Dataset;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Pixels scaled to `[0, 1]` and flattened in file order.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format(format!("record {i} has label byte {label}")));
        }
        labels.push(usize::from(label));
        pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor::matrix(n, CIFAR_PIXELS, pixels)?, labels)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn parses_labels_and_scales_pixels() {
        let mut bytes = record(3, 255);
        bytes.extend(record(0, 0));
        bytes[1 + 1024] = 51; // first green pixel of record 0
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 0]);
        assert_eq!(ds.dim(), 3072);
        assert_eq!(ds.sample(0)[0], 1.0);
        assert!((ds.sample(0)[1024] - 0.2).abs() < 1e-15);
        assert_eq!(ds.sample(1)[5], 0.0);
    }

    #[test]
    fn full_batch_size_is_accepted() {
        // 10000 records is exactly 30,730,000 bytes
        assert_eq!(10_000 * CIFAR_RECORD, 30_730_000);
        let bytes = vec![0u8; 10_000 * CIFAR_RECORD];
        assert_eq!(parse_cifar10(&bytes).unwrap().len(), 10_000);
    }

    #[test]
    fn truncated_and_bad_label_are_rejected() {
        let bytes = record(1, 7);
        assert!(matches!(parse_cifar10(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&[]), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&record(255, 0)), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&record(10, 0)), Err(Error::Format(_))));
    }
}
