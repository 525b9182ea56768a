use rand::Rng;

use super::{init, Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Grouped 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::config(
                format!("{prefix}.groups"),
                format!("{groups} must divide in_ch {in_ch} and out_ch {out_ch}"),
            ));
        }
        let shape = [out_ch, in_ch / groups, kernel, kernel];
        let weight = store.add(format!("{prefix}.weight"), init::conv_fan_out(&shape, groups, rng), true);
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]), true));
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, padding, groups })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(Error::dim("conv2d channels", ctx.tape.shape(x), &[self.in_ch]));
        }
        let w = ctx.param(store, self.weight);
        let b = self.bias.map(|b| ctx.param(store, b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Per-sample normalization over channels and space together (a single
/// group), with a learned per-channel affine.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{prefix}.scale"), Tensor::ones(&[channels]), false),
            shift: store.add(format!("{prefix}.shift"), Tensor::zeros(&[channels]), false),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = ctx.param(store, self.scale);
        let b = ctx.param(store, self.shift);
        ctx.tape.channel_norm(x, g, b)
    }
}

/// Last-axis layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{prefix}.scale"), Tensor::ones(&[dim]), false),
            shift: store.add(format!("{prefix}.shift"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = ctx.param(store, self.scale);
        let b = ctx.param(store, self.shift);
        ctx.tape.layer_norm(x, g, b)
    }
}

/// `y = x·Wᵀ + b` over the last axis; `W` is stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), init::trunc_normal(&[out_dim, in_dim], 0.02, rng), true);
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]), true));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", &shape, &[self.out_dim, self.in_dim]));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { ctx.tape.reshape(x, &[rows, self.in_dim])? };
        let w = ctx.param(store, self.weight);
        let mut y = ctx.tape.matmul_nt(flat, w)?;
        if let Some(b) = self.bias {
            let bv = ctx.param(store, b);
            let b2 = ctx.tape.reshape(bv, &[1, self.out_dim])?;
            y = ctx.tape.add(y, b2)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        ctx.tape.reshape(y, &out_shape)
    }
}
