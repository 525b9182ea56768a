use rand::Rng;

use super::{ChannelNorm, Conv2d, Ctx, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Expand (1×1) → depthwise (3×3) → project (1×1), with a residual when
/// the block keeps both resolution and width.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub expand: Option<(Conv2d, ChannelNorm)>,
    pub depthwise: Conv2d,
    pub depthwise_norm: ChannelNorm,
    pub project: Conv2d,
    pub project_norm: ChannelNorm,
    pub in_ch: usize,
    pub out_ch: usize,
    pub hidden: usize,
    pub stride: usize,
}

impl InvertedResidual {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        expand_ratio: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if expand_ratio == 0 || !(stride == 1 || stride == 2) {
            return Err(Error::config(prefix, format!("expand_ratio {expand_ratio}, stride {stride}")));
        }
        let hidden = in_ch * expand_ratio;
        let expand = (expand_ratio != 1).then(|| -> Result<_> {
            Ok((
                Conv2d::new(store, &format!("{prefix}.expand"), in_ch, hidden, 1, 1, 0, 1, false, rng)?,
                ChannelNorm::new(store, &format!("{prefix}.expand_norm"), hidden),
            ))
        });
        let expand = expand.transpose()?;
        Ok(Self {
            expand,
            depthwise: Conv2d::new(store, &format!("{prefix}.dw"), hidden, hidden, 3, stride, 1, hidden, false, rng)?,
            depthwise_norm: ChannelNorm::new(store, &format!("{prefix}.dw_norm"), hidden),
            project: Conv2d::new(store, &format!("{prefix}.project"), hidden, out_ch, 1, 1, 0, 1, false, rng)?,
            project_norm: ChannelNorm::new(store, &format!("{prefix}.project_norm"), out_ch),
            in_ch,
            out_ch,
            hidden,
            stride,
        })
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((conv, norm)) = &self.expand {
            h = conv.forward(ctx, store, h)?;
            h = norm.forward(ctx, store, h)?;
            h = ctx.tape.relu6(h);
        }
        h = self.depthwise.forward(ctx, store, h)?;
        h = self.depthwise_norm.forward(ctx, store, h)?;
        h = ctx.tape.relu6(h);
        h = self.project.forward(ctx, store, h)?;
        h = self.project_norm.forward(ctx, store, h)?;
        if self.has_residual() {
            h = ctx.tape.add(x, h)?;
        }
        Ok(h)
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self { fc: Linear::new(store, &format!("{prefix}.fc"), channels, classes, true, rng) }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = ctx.tape.spatial_mean(x)?;
        self.fc.forward(ctx, store, pooled)
    }
}
