//! Full classifiers: convolutional stem, inverted-residual stages, filter
//! attention at three resolutions, pooled global attention and a linear head.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, TensorEntry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter_attention::{EvalSelection, FilterAttention, FilterAttentionSpec, MaskRecord, PooledGlobalAttention, Variant};
use crate::nn::{ChannelNorm, ClassifierHead, Conv2d, Ctx, InvertedResidual, ParamStore};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "two")]
    pub stride: usize,
}

fn three() -> usize {
    3
}
fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageConfig {
    InvertedResidual {
        channels: usize,
        #[serde(default = "one")]
        repeats: usize,
        /// Stride of the first block; later repeats use 1.
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "four")]
        expand_ratio: usize,
    },
    FilterAttention {
        /// Token budget; `None` means `⌈H·W/4⌉`.
        #[serde(default)]
        k: Option<usize>,
        depth: usize,
        heads: usize,
        #[serde(default = "two")]
        mlp_ratio: usize,
    },
    PooledAttention {
        window: usize,
        depth: usize,
        heads: usize,
        #[serde(default = "two")]
        mlp_ratio: usize,
    },
}

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub residual_scatter: bool,
    #[serde(default)]
    pub eval_selection: EvalSelection,
}

impl ModelConfig {
    /// The 64×64 reference layout: filter attention at 32², 16² and 8² with
    /// K = 256, 64, 16, then pooled attention and a final widening block.
    pub fn reference(num_classes: usize) -> Self {
        use StageConfig::*;
        let ir = |channels, stride| InvertedResidual { channels, repeats: 1, stride, expand_ratio: 4 };
        let fa = || FilterAttention { k: None, depth: 2, heads: 2, mlp_ratio: 2 };
        Self {
            input_size: 64,
            in_channels: 3,
            stem: StemConfig { channels: 16, kernel: 3, stride: 2 },
            stages: vec![
                ir(24, 1),
                fa(),
                ir(48, 2),
                fa(),
                ir(64, 2),
                fa(),
                PooledAttention { window: 2, depth: 2, heads: 2, mlp_ratio: 2 },
                ir(96, 1),
            ],
            num_classes,
            variant: Variant::Filter,
            residual_scatter: false,
            eval_selection: EvalSelection::TopK,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Walks the stages, checking resolution and budget invariants.
    /// Returns `(channels, height)` entering each stage.
    pub fn plan(&self) -> Result<Vec<(usize, usize)>> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        let s = &self.stem;
        if s.stride == 0 || self.input_size % s.stride != 0 {
            return Err(Error::config("stem.stride", format!("{} does not divide input {}", s.stride, self.input_size)));
        }
        let (mut c, mut h) = (s.channels, self.input_size / s.stride);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            out.push((c, h));
            match *st {
                StageConfig::InvertedResidual { channels, repeats, stride, .. } => {
                    if repeats == 0 {
                        return Err(Error::config(format!("stages[{i}].repeats"), "must be positive"));
                    }
                    if stride == 2 {
                        if h % 2 != 0 {
                            return Err(Error::config(format!("stages[{i}].stride"), format!("cannot halve {h} exactly")));
                        }
                        h /= 2;
                    }
                    c = channels;
                }
                StageConfig::FilterAttention { k, .. } => {
                    let k = k.unwrap_or_else(|| default_k(h, h));
                    if k == 0 || k > h * h {
                        return Err(Error::config(format!("stages[{i}].k"), format!("K = {k} must be in 1..={}", h * h)));
                    }
                }
                StageConfig::PooledAttention { window, .. } => {
                    if window == 0 || h % window != 0 {
                        return Err(Error::config(format!("stages[{i}].window"), format!("{window} does not divide {h}")));
                    }
                }
            }
        }
        out.push((c, h));
        Ok(out)
    }

    pub fn filter_stage_count(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, StageConfig::FilterAttention { .. })).count()
    }
}

/// `⌈H·W/4⌉`.
pub fn default_k(h: usize, w: usize) -> usize {
    (h * w).div_ceil(4)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    InvertedResidual(Vec<InvertedResidual>),
    FilterAttention(FilterAttention),
    PooledAttention(PooledGlobalAttention),
}

#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: (Conv2d, ChannelNorm),
    pub stages: Vec<Stage>,
    pub head: ClassifierHead,
}

/// Builds a freshly initialised model; parameters depend only on `cfg`
/// (minus the selection policy) and `seed`.
pub fn build_model<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let plan = cfg.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = &cfg.stem;
    let stem = (
        Conv2d::new(&mut store, "stem.conv", cfg.in_channels, s.channels, s.kernel, s.stride, s.kernel / 2, 1, false, &mut rng)?,
        ChannelNorm::new(&mut store, "stem.norm", s.channels),
    );
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, (st, &(c, h))) in cfg.stages.iter().zip(&plan).enumerate() {
        let prefix = format!("stages.{i}");
        stages.push(match *st {
            StageConfig::InvertedResidual { channels, repeats, stride, expand_ratio } => {
                let blocks = (0..repeats)
                    .map(|r| {
                        let (cin, stride) = if r == 0 { (c, stride) } else { (channels, 1) };
                        InvertedResidual::new(&mut store, &format!("{prefix}.{r}"), cin, channels, expand_ratio, stride, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                Stage::InvertedResidual(blocks)
            }
            StageConfig::FilterAttention { k, depth, heads, mlp_ratio } => {
                let spec = FilterAttentionSpec {
                    channels: c,
                    height: h,
                    width: h,
                    k: k.unwrap_or_else(|| default_k(h, h)),
                    depth,
                    heads,
                    mlp_ratio,
                    variant: cfg.variant,
                    residual_scatter: cfg.residual_scatter,
                    eval_selection: cfg.eval_selection,
                };
                Stage::FilterAttention(FilterAttention::new(&mut store, &prefix, spec, &mut rng)?)
            }
            StageConfig::PooledAttention { window, depth, heads, mlp_ratio } => {
                Stage::PooledAttention(PooledGlobalAttention::new(&mut store, &prefix, c, window, depth, heads, mlp_ratio, &mut rng)?)
            }
        });
    }
    let (c, _) = *plan.last().expect("plan has a final entry");
    let head = ClassifierHead::new(&mut store, "head", c, cfg.num_classes, &mut rng);
    Ok(Model { config: cfg.clone(), params: store, stem, stages, head })
}

impl<T: Element> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Switches the selection policy of every filter-attention stage.
    /// Parameter shapes are untouched.
    pub fn set_variant(&mut self, variant: Variant) {
        self.config.variant = variant;
        for st in &mut self.stages {
            if let Stage::FilterAttention(fa) = st {
                fa.spec.variant = variant;
            }
        }
    }

    /// `(B, in_channels, H, W)` → `(B, num_classes)` logits.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        let n = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != n || shape[3] != n {
            return Err(Error::dim("model input", shape, &[0, self.config.in_channels, n, n]));
        }
        let p = &self.params;
        let h = self.stem.0.forward(ctx, p, x)?;
        let h = self.stem.1.forward(ctx, p, h)?;
        let mut h = ctx.tape.relu6(h);
        for st in &self.stages {
            h = match st {
                Stage::InvertedResidual(blocks) => {
                    for b in blocks {
                        h = b.forward(ctx, p, h)?;
                    }
                    h
                }
                Stage::FilterAttention(fa) => fa.forward(ctx, p, h)?,
                Stage::PooledAttention(pa) => pa.forward(ctx, p, h)?,
            };
        }
        self.head.forward(ctx, p, h)
    }

    /// Evaluation-mode logits together with each filter stage's importance
    /// map and selection, in stage order.
    pub fn forward_with_masks(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<MaskRecord<T>>)> {
        let mut ctx = Ctx::eval().record_masks();
        let xv = ctx.input(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        let logits = ctx.tape.value(y).clone();
        Ok((logits, ctx.masks.take().unwrap_or_default()))
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::eval();
        let xv = ctx.input(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Copies parameter values by name from `tensors`, checking shapes.
    pub fn load_params<'a>(&mut self, mut get: impl FnMut(&str) -> Option<&'a Tensor<T>>) -> Result<()> {
        for p in self.params.iter_mut() {
            let t = get(&p.name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("load_params", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
