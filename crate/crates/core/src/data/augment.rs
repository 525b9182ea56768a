use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.5; 3], std: [0.5; 3] }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::config("normalization.std", format!("must be strictly positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// Random resized crop: area fraction drawn from `scale`, aspect ratio
/// log-uniform in `[3/4, 4/3]`, resized to `output × output`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPolicy {
    pub scale: (f64, f64),
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub crop: Option<CropPolicy>,
    #[serde(default)]
    pub flip_prob: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { crop: None, flip_prob: 0.0, normalization: Normalization::default() }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", format!("{} is not a probability", self.flip_prob)));
        }
        if let Some(c) = self.crop {
            let (lo, hi) = c.scale;
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config("crop.scale", format!("need 0 < lo ≤ hi ≤ 1, got {:?}", c.scale)));
            }
            if c.output == 0 {
                return Err(Error::config("crop.output", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Resize to `resize × resize`, take the central `crop × crop`, normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPolicy {
    pub resize: usize,
    pub crop: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl EvalPolicy {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config("eval.crop", format!("{} must be in 1..={}", self.crop, self.resize)));
        }
        Ok(())
    }
}

/// Crop box `(top, left, height, width)` in source pixels.
type Box2 = (f64, f64, f64, f64);

/// Bilinear resampling of the box of a `(C, H, W)` image onto an `oh × ow`
/// grid, using pixel-centre alignment and edge clamping.
fn resample_box(t: &Tensor<f32>, b: Box2, oh: usize, ow: usize) -> Tensor<f32> {
    let [c, h, w] = t.shape()[..] else { unreachable!("images are rank 3") };
    let (top, left, bh, bw) = b;
    let (sy, sx) = (bh / oh as f64, bw / ow as f64);
    let axis = |o: usize, s: f64, off: f64, n: usize| {
        let p = (off + (o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (p - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|o| axis(o, sy, top, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| axis(o, sx, left, w)).collect();
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("shape matches data")
}

/// Nearest-neighbour resampling of a boolean `h × w` mask box.
fn resample_mask(m: &[bool], h: usize, w: usize, b: Box2, oh: usize, ow: usize) -> Vec<bool> {
    let (top, left, bh, bw) = b;
    let pick = |o: usize, s: f64, off: f64, n: usize| ((off + (o as f64 + 0.5) * s).floor() as usize).min(n - 1);
    (0..oh)
        .flat_map(|y| (0..ow).map(move |x| (y, x)))
        .map(|(y, x)| m[pick(y, bh / oh as f64, top, h) * w + pick(x, bw / ow as f64, left, w)])
        .collect()
}

fn apply_box(img: &LabeledImage, b: Box2, oh: usize, ow: usize) -> LabeledImage {
    let (h, w) = (img.height(), img.width());
    LabeledImage {
        pixels: resample_box(&img.pixels, b, oh, ow),
        label: img.label,
        region: img.region.as_ref().map(|m| resample_mask(m, h, w, b, oh, ow)),
    }
}

/// Bilinear resize of a `(C, H, W)` image.
pub fn resize_bilinear(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    resample_box(t, (0.0, 0.0, h as f64, w as f64), oh, ow)
}

/// Reverses the column order of every row.
pub fn flip_horizontal(img: &LabeledImage) -> LabeledImage {
    let (h, w) = (img.height(), img.width());
    let mut px = img.pixels.clone();
    for row in px.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    let region = img.region.as_ref().map(|m| {
        let mut m = m.clone();
        for row in m.chunks_exact_mut(w) {
            row.reverse();
        }
        debug_assert_eq!(m.len(), h * w);
        m
    });
    LabeledImage { pixels: px, label: img.label, region }
}

pub fn normalize(t: &Tensor<f32>, n: &Normalization) -> Tensor<f32> {
    per_channel(t, |c, v| (v - n.mean[c]) / n.std[c])
}

pub fn denormalize(t: &Tensor<f32>, n: &Normalization) -> Tensor<f32> {
    per_channel(t, |c, v| v * n.std[c] + n.mean[c])
}

fn per_channel(t: &Tensor<f32>, f: impl Fn(usize, f32) -> f32) -> Tensor<f32> {
    let plane = t.shape()[1] * t.shape()[2];
    let data = t.data().iter().enumerate().map(|(i, &v)| f((i / plane) % 3, v)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

fn random_box(h: usize, w: usize, scale: (f64, f64), rng: &mut impl Rng) -> Box2 {
    let area = (h * w) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f64 && ch <= h as f64 {
            let top = rng.random_range(0..=(h - ch as usize)) as f64;
            let left = rng.random_range(0..=(w - cw as usize)) as f64;
            return (top, left, ch, cw);
        }
    }
    (0.0, 0.0, h as f64, w as f64)
}

/// Training-time transform: optional random resized crop, optional
/// horizontal flip, then normalization. The label is never touched.
pub fn augment(img: &LabeledImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> LabeledImage {
    let mut out = match policy.crop {
        Some(c) => apply_box(img, random_box(img.height(), img.width(), c.scale, rng), c.output, c.output),
        None => img.clone(),
    };
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        out = flip_horizontal(&out);
    }
    out.pixels = normalize(&out.pixels, &policy.normalization);
    out
}

/// Validation transform: resize, centre crop, normalize.
pub fn eval_transform(img: &LabeledImage, policy: &EvalPolicy) -> LabeledImage {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (r, c) = (policy.resize as f64, policy.crop as f64);
    // centre crop of the resized image, expressed in source coordinates
    let off = (r - c) / 2.0;
    let b = (off * h / r, off * w / r, c * h / r, c * w / r);
    let mut out = apply_box(img, b, policy.crop, policy.crop);
    out.pixels = normalize(&out.pixels, &policy.normalization);
    out
}
