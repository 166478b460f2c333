pub mod autograd;
pub mod backbones;
pub mod data;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod knowledge;
pub mod nn;
pub mod pipeline;
pub mod regularizers;

pub use error::{EdkError, Result};

/// Train mode samples stochastic components; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
