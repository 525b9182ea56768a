//! Datasets, augmentation and batching.
//!
//! Images are `(3, H, W)` tensors with values in `[0, 1]` until normalized.

mod augment;
mod cifar;
mod ppm;
mod synth;

pub use augment::{augment, denormalize, eval_transform, flip_horizontal, normalize, resize_bilinear, AugmentPolicy, CropPolicy, EvalPolicy, Normalization};
pub use cifar::{load_cifar10_binary, parse_cifar10, CIFAR_CLASSES, CIFAR_RECORD};
pub use ppm::{read_ppm, write_ppm, PpmImage};
pub use synth::{synth_dataset, SHAPES};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `(3, H, W)`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Row-major `H × W` marker of the class-defining region, when known.
    pub region: Option<Vec<bool>>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` items and the rest.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.images.split_off(n.min(self.images.len()));
        let k = self.num_classes;
        (self, Dataset { images: rest, num_classes: k })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { images: indices.iter().map(|&i| self.images[i].clone()).collect(), num_classes: self.num_classes }
    }

    pub fn map(&self, f: impl Fn(&LabeledImage) -> LabeledImage) -> Dataset {
        Dataset { images: self.images.iter().map(f).collect(), num_classes: self.num_classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for im in &self.images {
            c[im.label] += 1;
        }
        c
    }
}

/// Index batches covering `0..n` exactly once; shuffled when a seed is given.
/// The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks images into `(B, 3, H, W)` and collects their labels.
pub fn collate<'a, T: Element>(items: impl IntoIterator<Item = &'a LabeledImage>) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for im in items {
        match &shape {
            Some(s) if s != im.pixels.shape() => return Err(Error::dim("collate", s, im.pixels.shape())),
            Some(_) => {}
            None => shape = Some(im.pixels.shape().to_vec()),
        }
        data.extend(im.pixels.data().iter().map(|&v| T::from_f64c(v as f64)));
        labels.push(im.label);
    }
    let Some(s) = shape else {
        return Err(Error::contract("collate of an empty batch"));
    };
    let mut full = vec![labels.len()];
    full.extend(s);
    Ok((Tensor::new(&full, data)?, labels))
}

/// Batches of `(x, labels)` in a seeded shuffled order.
pub fn batch_iter<'a, T: Element>(
    ds: &'a Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a> {
    let batches = batch_indices(ds.len(), batch_size, shuffle_seed)?;
    Ok(batches.into_iter().map(move |idx| collate(idx.iter().map(|&i| &ds.images[i]))))
}
