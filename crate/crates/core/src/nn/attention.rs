use rand::Rng;

use super::{Ctx, LayerNorm, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Scaled dot-product self-attention split across `heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{prefix}.heads"), format!("{heads} must divide model dim {dim}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{prefix}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{prefix}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{prefix}.proj"), dim, dim, true, rng),
            dim,
            heads,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_impl(ctx, store, x).map(|(y, _)| y)
    }

    /// Like `forward`, also returning the `(B·heads, K, K)` attention weights.
    pub fn forward_inspect<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Tensor<T>)> {
        let (y, mixed) = self.forward_impl(ctx, store, x)?;
        let w = ctx.tape.attention_weights(mixed).expect("fused attention node");
        Ok((y, w))
    }

    fn forward_impl<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(x).to_vec();
        let [b, k, c] = shape[..] else {
            return Err(Error::dim("attention", &shape, &[self.dim]));
        };
        if c != self.dim {
            return Err(Error::dim("attention", &shape, &[self.dim]));
        }
        if k == 0 {
            return Err(Error::contract("attention over an empty token set"));
        }
        let (h, d) = (self.heads, self.dim / self.heads);
        let split = |lin: &Linear, ctx: &mut Ctx<T>| -> Result<Var> {
            let y = lin.forward(ctx, store, x)?;
            let y = ctx.tape.reshape(y, &[b, k, h, d])?;
            let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
            ctx.tape.reshape(y, &[b * h, k, d])
        };
        let q = split(&self.query, ctx)?;
        let kk = split(&self.key, ctx)?;
        let v = split(&self.value, ctx)?;
        let mixed = ctx.tape.attention(q, kk, v, 1.0 / (d as f64).sqrt())?;
        let y = ctx.tape.reshape(mixed, &[b, h, k, d])?;
        let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
        let y = ctx.tape.reshape(y, &[b, k, c])?;
        let y = self.out.forward(ctx, store, y)?;
        Ok((y, mixed))
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim),
            attn: MultiHeadSelfAttention::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio, true, rng),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim, true, rng),
        })
    }

    pub fn attention_branch<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(ctx, store, x)?;
        self.attn.forward(ctx, store, n)
    }

    pub fn mlp_branch<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.norm2.forward(ctx, store, x)?;
        let hdn = self.fc1.forward(ctx, store, n)?;
        let hdn = ctx.tape.gelu(hdn);
        self.fc2.forward(ctx, store, hdn)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attention_branch(ctx, store, x)?;
        let x = ctx.tape.add(x, a)?;
        let m = self.mlp_branch(ctx, store, x)?;
        ctx.tape.add(x, m)
    }
}

/// Stack of [`TransformerLayer`]s over `(B, K, C)` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TransformerEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{prefix}.heads"), format!("{heads} must divide model dim {dim}")));
        }
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{prefix}.layers.{i}"), dim, heads, mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, dim, heads, mlp_ratio })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim("transformer_encoder", shape, &[self.dim]));
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(ctx, store, h))
    }
}
