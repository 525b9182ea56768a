use std::path::Path;

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by a 32×32 RGB image stored channel-planar.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 binary size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let images = bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Format(format!("record {i}: label byte {label} exceeds 9")));
            }
            let px = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage { pixels: Tensor::new(&[3, 32, 32], px)?, label, region: None })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { images, num_classes: CIFAR_CLASSES })
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?)
}
