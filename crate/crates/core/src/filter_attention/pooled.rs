use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore, TransformerEncoder};
use crate::tensor::{Element, Var};

/// Average-pools the map, attends over the pooled grid, upsamples the result
/// by nearest neighbour and adds it onto the input.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGlobalAttention {
    pub encoder: TransformerEncoder,
    pub window: usize,
}

impl PooledGlobalAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        window: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::config(format!("{prefix}.window"), "must be positive"));
        }
        let encoder = TransformerEncoder::new(store, &format!("{prefix}.encoder"), channels, depth, heads, mlp_ratio, rng)?;
        Ok(Self { encoder, window })
    }

    /// Tokens entering attention for an `h × w` map.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        (h / self.window) * (w / self.window)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::dim("pooled_attention", &shape, &[self.window]));
        };
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::config("window", format!("{} does not divide {h}×{w}", self.window)));
        }
        let (ph, pw) = (h / self.window, w / self.window);
        let pooled = ctx.tape.avg_pool2d(x, self.window, self.window)?;
        let t = ctx.tape.reshape(pooled, &[b, c, ph * pw])?;
        let t = ctx.tape.permute(t, &[0, 2, 1])?;
        let t = self.encoder.forward(ctx, store, t)?;
        let t = ctx.tape.permute(t, &[0, 2, 1])?;
        let grid = ctx.tape.reshape(t, &[b, c, ph, pw])?;
        let up = ctx.tape.upsample_nearest(grid, self.window)?;
        ctx.tape.add(x, up)
    }
}
