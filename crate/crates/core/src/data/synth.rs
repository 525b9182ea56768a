//! Procedural "locality" images: one small shape, whose kind is the class,
//! dropped at a random position over noise. The shape's pixel budget is the
//! same for every class and its position is uniform, so per-pixel statistics
//! barely depend on the class and a linear read-out of raw pixels stays weak.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIZE: usize = 64;
const STAMP: usize = 16;

/// Shape names, in class order.
pub const SHAPES: [&str; 8] = ["h_bar", "v_bar", "diagonal", "anti_diagonal", "plus", "ring", "corner", "x_cross"];

/// `STAMP × STAMP` footprint of each class.
fn stamp(class: usize) -> Vec<bool> {
    let n = STAMP;
    let mid = n / 2;
    (0..n * n)
        .map(|p| {
            let (r, c) = (p / n, p % n);
            // a three-wide band, padded at both ends to the bars' 3·n pixels
            let diag = |r: usize, c: usize| r.abs_diff(c) <= 1 || (r == 0 && c == 2) || (r == n - 1 && c == n - 3);
            match class {
                0 => (mid - 1..=mid + 1).contains(&r),
                1 => (mid - 1..=mid + 1).contains(&c),
                2 => diag(r, c),
                3 => diag(r, n - 1 - c),
                4 => (r == mid && (c < n)) || (c == mid && r != mid),
                5 => (r == 2 || r == n - 3) && (2..n - 2).contains(&c) || (c == 2 || c == n - 3) && (3..n - 3).contains(&r),
                6 => (r == n - 1 && c < n) || (c == 0 && r < n - 1) || (r == n - 2 && c == 1),
                _ => c == r || c == n - 1 - r,
            }
        })
        .collect()
}

/// `n` images of `num_classes` shape classes, assigned round-robin and then
/// shuffled, so every class count is within one of `n / num_classes`.
pub fn synth_dataset(num_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPES.len()).contains(&num_classes) {
        return Err(Error::config("num_classes", format!("synthetic data supports 2..={} classes", SHAPES.len())));
    }
    if n < num_classes {
        return Err(Error::config("n", format!("{n} images cannot cover {num_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stamps: Vec<Vec<bool>> = (0..num_classes).map(stamp).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let plane = SIZE * SIZE;
    let images = labels
        .into_iter()
        .map(|label| {
            let mut px = vec![0.0f32; 3 * plane];
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.2));
            for (i, v) in px.iter_mut().enumerate() {
                *v = tint[i / plane] + rng.random_range(0.0..0.25);
            }
            let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
            let (top, left) = (rng.random_range(0..=SIZE - STAMP), rng.random_range(0..=SIZE - STAMP));
            let mut region = vec![false; plane];
            for (s, _) in stamps[label].iter().enumerate().filter(|(_, &on)| on) {
                let p = (top + s / STAMP) * SIZE + left + s % STAMP;
                region[p] = true;
                for (c, &col) in colour.iter().enumerate() {
                    px[c * plane + p] = col;
                }
            }
            LabeledImage { pixels: Tensor::new(&[3, SIZE, SIZE], px).expect("shape matches"), label, region: Some(region) }
        })
        .collect();
    Ok(Dataset { images, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_four_stamps_share_a_pixel_budget() {
        let counts: Vec<usize> = (0..4).map(|c| stamp(c).iter().filter(|&&b| b).count()).collect();
        assert_eq!(counts, vec![48; 4]);
        for c in 4..SHAPES.len() {
            assert!(stamp(c).iter().any(|&b| b));
        }
    }
}
