//! Parameter storage, the forward context and standard layers.

mod attention;
mod blocks;
pub mod init;
mod layers;

pub use attention::{MultiHeadSelfAttention, TransformerEncoder, TransformerLayer};
pub use blocks::{ClassifierHead, InvertedResidual};
pub use layers::{ChannelNorm, Conv2d, LayerNorm, Linear};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::filter_attention::MaskRecord;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether the optimizer applies weight decay to this tensor.
    pub decay: bool,
}

/// Flat, ordered collection of named parameters owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) execution context.
///
/// Owns its tape, the parameter bindings of the current pass, the random
/// generator used by random token selection, and an optional mask collector.
pub struct Ctx<T: Element> {
    pub tape: Tape<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub masks: Option<Vec<MaskRecord<T>>>,
}

impl<T: Element> Ctx<T> {
    pub fn new(mode: Mode, track_grads: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            bound: Vec::new(),
            track_grads,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            masks: None,
        }
    }

    /// Training pass with gradients.
    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train, true, seed)
    }

    /// Inference pass without gradients.
    pub fn eval() -> Self {
        Self::new(Mode::Eval, false, 0)
    }

    /// Enables recording of per-block masks and selections.
    pub fn record_masks(mut self) -> Self {
        self.masks = Some(Vec::new());
        self
    }

    pub fn tracks_grads(&self) -> bool {
        self.track_grads
    }

    /// Binds a parameter to this pass; repeated calls return the same [`Var`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = store.get(id).value.clone().with_grad(self.track_grads);
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    /// Gradients for every parameter in store order (`None` if unused this pass).
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| self.tape.grad(v).map(<[T]>::to_vec))
            })
            .collect()
    }
}
