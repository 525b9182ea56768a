//! Filter-mask extraction, overlays and selection statistics.
//!
//! Colormap: linear blend from blue `(0, 0, 1)` at 0 to red `(1, 0, 0)` at 1.

use serde::{Deserialize, Serialize};

use crate::data::PpmImage;
use crate::error::{Error, Result};
use crate::filter_attention::{ImportanceMap, MaskRecord};
use crate::model::Model;
use crate::tensor::{Element, SelectionIndex, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    BlueRed,
}

impl Colormap {
    pub const BLUE: [f64; 3] = [0.0, 0.0, 1.0];
    pub const RED: [f64; 3] = [1.0, 0.0, 0.0];

    pub fn rgb(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::BlueRed => std::array::from_fn(|c| (1.0 - v) * Self::BLUE[c] + v * Self::RED[c]),
        }
    }
}

/// Logits plus everything the filter stages saw.
#[derive(Clone, Debug)]
pub struct Extraction<T> {
    pub logits: Tensor<T>,
    pub records: Vec<MaskRecord<T>>,
}

impl<T: Element> Extraction<T> {
    pub fn masks(&self) -> Vec<&ImportanceMap<T>> {
        self.records.iter().map(|r| &r.importance).collect()
    }
}

/// Runs inference on a `(3, H, W)` or `(B, 3, H, W)` input and returns one
/// record per filter-attention stage, in network order.
pub fn extract_masks<T: Element>(model: &Model<T>, image: &Tensor<T>) -> Result<Extraction<T>> {
    if model.config.filter_stage_count() == 0 {
        return Err(Error::Contract("model has no filter-attention stages to extract".into()));
    }
    let x = match image.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            image.clone().reshape(&s)?
        }
        _ => image.clone(),
    };
    let (logits, records) = model.forward_with_masks(&x)?;
    Ok(Extraction { logits, records })
}

/// Nearest-neighbour resize of a row-major `h × w` grid: output pixel `(i, j)`
/// reads source `(⌊i·h/oh⌋, ⌊j·w/ow⌋)`.
pub fn upsample_nearest<V: Copy>(src: &[V], h: usize, w: usize, oh: usize, ow: usize) -> Vec<V> {
    (0..oh * ow).map(|p| src[(p / ow) * h / oh * w + (p % ow) * w / ow]).collect()
}

/// `(1−α)·image + α·colormap(mask)` as a `(3, H, W)` tensor in `[0, 1]`.
/// `mask` is row-major `mh × mw` and is upsampled to the image size.
pub fn blend(image: &Tensor<f32>, mask: &[f64], mh: usize, mw: usize, alpha: f64, cmap: Colormap) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("overlay alpha {alpha} is outside [0, 1]")));
    }
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::dim("overlay image", image.shape(), &[3, 0, 0]));
    };
    if mask.len() != mh * mw || mh == 0 || mw == 0 {
        return Err(Error::dim("overlay mask", &[mask.len()], &[mh * mw]));
    }
    let up = upsample_nearest(mask, mh, mw, h, w);
    let plane = h * w;
    let px = image.data();
    let mut out = vec![0.0f32; 3 * plane];
    for (p, &m) in up.iter().enumerate() {
        let col = cmap.rgb(m);
        for c in 0..3 {
            let v = (1.0 - alpha) * px[c * plane + p] as f64 + alpha * col[c];
            out[c * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// [`blend`], quantized and encoded as binary PPM.
pub fn render_overlay(image: &Tensor<f32>, mask: &[f64], mh: usize, mw: usize, alpha: f64, cmap: Colormap) -> Result<Vec<u8>> {
    Ok(PpmImage::from_tensor(&blend(image, mask, mh, mw, alpha, cmap)?)?.to_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCoverage {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// `K / (H·W)`.
    pub selected_fraction: f64,
    pub selected_mean: f64,
    /// Absent when every position is selected.
    pub non_selected_mean: Option<f64>,
    /// IoU with the previous stage, both upsampled to the finer grid.
    pub iou_with_previous: Option<f64>,
    /// Against the class-defining region, at image resolution.
    pub region_iou: Option<f64>,
    /// Share of the region covered by the selection; a uniformly random
    /// selection covers `K / (H·W)` of it in expectation.
    pub region_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub stages: Vec<StageCoverage>,
}

fn selected_grid(sel: &[usize], n: usize) -> Vec<bool> {
    let mut g = vec![false; n];
    for &i in sel {
        g[i] = true;
    }
    g
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-stage statistics of one sample (`b`). `region`, when given, is a
/// row-major `rh × rw` marker at image resolution.
pub fn selection_coverage<T: Element>(
    masks: &[&ImportanceMap<T>],
    selections: &[&SelectionIndex],
    b: usize,
    region: Option<(&[bool], usize, usize)>,
) -> Result<CoverageReport> {
    if masks.len() != selections.len() {
        return Err(Error::Contract(format!("{} masks but {} selections", masks.len(), selections.len())));
    }
    let mut stages = Vec::with_capacity(masks.len());
    let mut prev: Option<(Vec<bool>, usize, usize)> = None;
    for (i, (m, s)) in masks.iter().zip(selections).enumerate() {
        let (h, w) = (m.height(), m.width());
        let n = h * w;
        if s.batch() != m.batch() || b >= m.batch() || s.iter().flatten().any(|&p| p >= n) {
            return Err(Error::Contract(format!(
                "stage {i}: selection of {} samples does not fit a {h}×{w} map of {} samples (sample {b})",
                s.batch(),
                m.batch()
            )));
        }
        let scores: Vec<f64> = m.sample(b).iter().map(|v| v.to_f64c()).collect();
        let sel = selected_grid(s.sample(b), n);
        let k = s.k();
        let mean = |want: bool| {
            let (sum, cnt) = scores.iter().zip(&sel).filter(|(_, &g)| g == want).fold((0.0, 0usize), |(a, c), (v, _)| (a + v, c + 1));
            (cnt > 0).then(|| sum / cnt as f64)
        };
        let iou_with_previous = prev.as_ref().map(|(pg, ph, pw)| {
            let (th, tw) = ((*ph).max(h), (*pw).max(w));
            iou(&upsample_nearest(pg, *ph, *pw, th, tw), &upsample_nearest(&sel, h, w, th, tw))
        });
        let (region_iou, region_recall) = match region {
            Some((r, rh, rw)) => {
                if r.len() != rh * rw {
                    return Err(Error::Contract(format!("region has {} cells, expected {rh}×{rw}", r.len())));
                }
                let up = upsample_nearest(&sel, h, w, rh, rw);
                let area = r.iter().filter(|&&x| x).count();
                let hit = up.iter().zip(r).filter(|(&a, &b)| a && b).count();
                (Some(iou(&up, r)), (area > 0).then(|| hit as f64 / area as f64))
            }
            None => (None, None),
        };
        stages.push(StageCoverage {
            stage: i,
            height: h,
            width: w,
            k,
            selected_fraction: k as f64 / n as f64,
            selected_mean: mean(true).unwrap_or(f64::NAN),
            non_selected_mean: mean(false),
            iou_with_previous,
            region_iou,
            region_recall,
        });
        prev = Some((sel, h, w));
    }
    Ok(CoverageReport { stages })
}

/// Convenience wrapper over an [`Extraction`].
pub fn coverage_of<T: Element>(ex: &Extraction<T>, b: usize, region: Option<(&[bool], usize, usize)>) -> Result<CoverageReport> {
    let masks: Vec<_> = ex.records.iter().map(|r| &r.importance).collect();
    let sels: Vec<_> = ex.records.iter().map(|r| &r.selection).collect();
    selection_coverage(&masks, &sels, b, region)
}
