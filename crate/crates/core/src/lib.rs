//! Learned top-K token filtering in front of transformer attention.
//!
//! A small convolution scores every spatial position of a feature map, the
//! map is scaled by those scores, and only the `K` best positions are sent
//! through a transformer encoder before being written back. A random
//! selection variant serves as an ablation baseline.

pub mod bench;
pub mod data;
pub mod error;
pub mod filter_attention;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, SelectionIndex, Tape, Tensor, Var};
