//! CIFAR-100 binary format: 3074-byte records of coarse label, fine label,
//! then 3072 pixel bytes (red, green, blue planes of 32×32, row-major).

use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 3074;
pub const SIDE: usize = 32;
pub const CLASSES: usize = 100;

/// Parses an in-memory CIFAR-100 binary file. Fine labels are kept.
pub fn parse_cifar100(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Format(format!(
            "CIFAR-100 file of {} bytes is not a multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut images = Vec::with_capacity(n * 3 * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CLASSES || rec[0] as usize >= 20 {
            return Err(Error::Format(format!(
                "record {i}: label bytes ({}, {}) out of range",
                rec[0], rec[1]
            )));
        }
        labels.push(fine);
        images.extend(rec[2..].iter().map(|&b| f32::from(b) / 255.0));
    }
    let names = (0..CLASSES).map(|c| format!("class_{c:02}")).collect();
    LabeledDataset::new(3, SIDE, SIDE, images, labels, names)
}

pub fn load_cifar100_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path.as_ref())?;
    parse_cifar100(&bytes)
}
