use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Element, Tensor};

/// Normal(0, std) resampled until within two standard deviations.
pub fn trunc_normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, 1.0).expect("valid normal");
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = dist.sample(rng);
            if z.abs() <= 2.0 {
                break T::c(z * std);
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// He-normal scaled by fan-out for `(Cout, Cin/groups, kh, kw)` kernels.
pub fn conv_fan_out<T: Element>(shape: &[usize], groups: usize, rng: &mut impl Rng) -> Tensor<T> {
    let fan_out = shape[0] * shape[2] * shape[3] / groups;
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::c(dist.sample(rng))).collect())
}

pub fn uniform<T: Element>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-scale, scale).expect("valid range");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::c(dist.sample(rng))).collect())
}
