//! Hybrid CNN-Transformer segmentation of dysplasia in H&E whole-slide images.

pub mod augment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod infer;
pub mod losses;
pub mod model;
pub mod morph;
pub mod stain;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
