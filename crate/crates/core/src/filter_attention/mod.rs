//! Learned top-K token filtering in front of a transformer encoder, its
//! random-selection counterpart, and pooled global attention.
//!
//! One block does, per sample:
//!
//! 1. score every position with `σ(conv(x))`;
//! 2. pick `K` positions (top-K of the scores, or uniformly at random);
//! 3. scale the whole map by the scores;
//! 4. gather the selected channel vectors and add their positional rows;
//! 5. run the encoder over those `K` tokens;
//! 6. write the encoded tokens back in place of the selected positions.
//!
//! Gradients reach the scorer only through step 3; the choice of indices
//! itself is discrete.

pub mod flops;
mod pooled;
mod select;

pub use pooled::PooledGlobalAttention;
pub use select::{random_select, top_k_select};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Conv2d, Ctx, Mode, ParamId, ParamStore, TransformerEncoder};
use crate::tensor::{Element, SelectionIndex, Tensor, Var};

/// How a block picks its `K` tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Top-K of the learned importance map.
    #[default]
    Filter,
    /// Uniform random subset during training.
    Dropout,
}

/// Selection used by the dropout variant outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSelection {
    /// Top-K of the learned importance map.
    #[default]
    TopK,
    /// Random subset from a generator reseeded with this value on every pass.
    FixedSeed(u64),
}

/// `(B, 1, H, W)` sigmoid scores, one per spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap<T>(Tensor<T>);

impl<T: Element> ImportanceMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        match t.shape() {
            [_, 1, _, _] => Ok(Self(t)),
            s => Err(Error::dim("importance map", s, &[0, 1, 0, 0])),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Scores of sample `b`, flattened row-major.
    pub fn sample(&self, b: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.0.data()[b * hw..(b + 1) * hw]
    }
}

/// What one block observed during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord<T> {
    pub importance: ImportanceMap<T>,
    pub selection: SelectionIndex,
}

/// Shape and policy settings of a [`FilterAttention`] block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterAttentionSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Token budget.
    pub k: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    /// Add encoded tokens onto the masked values instead of replacing them.
    #[serde(default)]
    pub residual_scatter: bool,
    #[serde(default)]
    pub eval_selection: EvalSelection,
}

impl FilterAttentionSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let hw = self.height * self.width;
        if self.k == 0 || self.k > hw {
            return Err(Error::config(format!("{prefix}.k"), format!("K = {} must be in 1..={hw}", self.k)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(
                format!("{prefix}.heads"),
                format!("{} must divide channels {}", self.heads, self.channels),
            ));
        }
        Ok(())
    }
}

/// Computes `σ(scorer(x))`.
pub fn compute_importance<T: Element>(ctx: &mut Ctx<T>, store: &ParamStore<T>, scorer: &Conv2d, x: Var) -> Result<Var> {
    if scorer.out_ch != 1 {
        return Err(Error::config("scorer.out_ch", format!("must be 1, got {}", scorer.out_ch)));
    }
    let s = scorer.forward(ctx, store, x)?;
    Ok(ctx.tape.sigmoid(s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterAttention {
    pub spec: FilterAttentionSpec,
    pub scorer: Conv2d,
    pub encoder: TransformerEncoder,
    /// `(H·W, C)` learned positional table.
    pub pos: ParamId,
}

impl FilterAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, spec: FilterAttentionSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(prefix)?;
        let c = spec.channels;
        let scorer = Conv2d::new(store, &format!("{prefix}.scorer"), c, 1, 3, 1, 1, 1, true, rng)?;
        // fan-out scaling would give a single-output conv logits of std ≈ √(2c),
        // saturating the sigmoid from the first step
        store.get_mut(scorer.weight).value = init::uniform(&[1, c, 3, 3], 1.0 / ((9 * c) as f64).sqrt(), rng);
        let encoder = TransformerEncoder::new(store, &format!("{prefix}.encoder"), c, spec.depth, spec.heads, spec.mlp_ratio, rng)?;
        let pos = store.add(format!("{prefix}.pos"), init::uniform(&[spec.height * spec.width, c], 0.02, rng), false);
        Ok(Self { spec, scorer, encoder, pos })
    }

    fn select<T: Element>(&self, ctx: &mut Ctx<T>, imp: &ImportanceMap<T>) -> Result<SelectionIndex> {
        let hw = self.spec.height * self.spec.width;
        match (self.spec.variant, ctx.mode, self.spec.eval_selection) {
            (Variant::Filter, _, _) | (Variant::Dropout, Mode::Eval, EvalSelection::TopK) => top_k_select(imp, self.spec.k),
            (Variant::Dropout, Mode::Train, _) => random_select(imp.batch(), hw, self.spec.k, &mut ctx.rng),
            (Variant::Dropout, Mode::Eval, EvalSelection::FixedSeed(seed)) => {
                random_select(imp.batch(), hw, self.spec.k, &mut ChaCha8Rng::seed_from_u64(seed))
            }
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let s = &self.spec;
        if shape.len() != 4 || shape[1] != s.channels || shape[2] != s.height || shape[3] != s.width {
            return Err(Error::dim("filter_attention", &shape, &[0, s.channels, s.height, s.width]));
        }
        let imp = compute_importance(ctx, store, &self.scorer, x)?;
        let imp_map = ImportanceMap::new(ctx.tape.value(imp).clone().with_grad(false))?;
        let sel = Arc::new(self.select(ctx, &imp_map)?);

        let masked = ctx.tape.mul(x, imp)?;
        let tokens = ctx.tape.gather(masked, sel.clone())?;
        let pos = ctx.param(store, self.pos);
        let pos_rows = ctx.tape.row_lookup(pos, sel.clone())?;
        let tokens = ctx.tape.add(tokens, pos_rows)?;
        let tokens = self.encoder.forward(ctx, store, tokens)?;
        let out = ctx.tape.scatter(masked, tokens, sel.clone(), s.residual_scatter)?;

        if let Some(masks) = ctx.masks.as_mut() {
            masks.push(MaskRecord { importance: imp_map, selection: (*sel).clone() });
        }
        Ok(out)
    }
}
