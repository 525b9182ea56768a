use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Tag stored in the binary tensor format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`](super::Tensor).
pub trait Element:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp` of every element, in place.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = v.exp());
    }

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64c(v)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = exp_f32(*v));
    }
}

/// Branch-free `expf` (Cody–Waite reduction, degree-6 polynomial), within a
/// couple of ulp of libm and vectorizable. Inputs below ≈ −87.3 saturate to
/// the smallest normal instead of flushing to zero.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.33, 88.72);
    let n = (x * LOG2E + 0.5).floor();
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0.0f64;
        for i in -87_000..88_000 {
            let x = i as f32 * 1e-3 + 3.7e-4;
            let mut v = [x];
            f32::exp_in_place(&mut v);
            let want = (x as f64).exp();
            worst = worst.max(((v[0] as f64) - want).abs() / want);
        }
        assert!(worst < 3e-7, "{worst}");
        let mut v = [-1e4f32, 0.0];
        f32::exp_in_place(&mut v);
        assert!(v[0] >= 0.0 && v[0] < 1e-37);
        assert_eq!(v[1], 1.0);
    }
}
