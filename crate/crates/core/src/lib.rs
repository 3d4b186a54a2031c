pub mod aligner;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod facet;
pub mod imageio;
pub mod lm;
pub mod numerics;
pub mod prompts;
pub mod store;
pub mod synth;
pub mod vit;

pub use error::{Error, FormatError, Result};
pub use numerics::{ParamId, ParamSet, Tape, Tensor, Var};
