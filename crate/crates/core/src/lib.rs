//! Cross-view lesion detection with learned pairwise correspondence.

pub mod assignment;
pub mod boxes;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod linker;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vild;

pub use error::{Error, Result};
pub use params::{Graph, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
