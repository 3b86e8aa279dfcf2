//! Desk-scale, CPU-only neural machine translation toolkit: attention LSTM
//! encoder-decoder with word features, guided alignment, entity placeholders,
//! BPE, incremental adaptation, magnitude pruning, sequence-level
//! distillation, batched beam search, ensembling and shallow fusion.

pub mod align;
pub mod ccs;
pub mod compress;
pub mod config;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod model;
pub mod ph;
pub mod rng;
pub mod serialize;
pub mod subword;
pub mod tensor;
pub mod textproc;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{ActivationKind, Graph, Var};
pub use rng::SplitMix64;
pub use tensor::{Scalar, Tensor};
