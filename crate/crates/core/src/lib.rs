//! Transplant LoRA adapters trained on one base model onto an upgraded model of
//! the same architecture family.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`transfer`] derives a hidden-size transfer matrix from the embedding rows
//!    of tokens both vocabularies share, plus per-layer intermediate-size maps.
//! 2. [`cka`] scores every (old layer, new layer) pair with minibatch CKA over
//!    calibration activations.
//! 3. [`layermap`] aligns layers monotonically with a bounded-offset dynamic
//!    program over that similarity matrix.
//! 4. [`headmap`] matches attention heads inside each mapped layer pair by the
//!    cosine similarity of their interaction matrices, solved with the
//!    Hungarian algorithm.
//! 5. [`transplant`] conjugates every per-head weight update into the new
//!    model's basis and re-factorizes each module with a truncated SVD.
//!
//! [`toyforge`] builds miniature model pairs with planted upgrade structure so
//! every stage can be checked against known ground truth.

pub mod cka;
pub mod cli;
pub mod error;
pub mod headmap;
pub mod layermap;
pub mod linalg;
pub mod tensor_io;
pub mod toyforge;
pub mod transfer;
pub mod transplant;

pub use error::{Error, Result};

/// Dense matrix type used throughout. Computation is done in `f64`; archives
/// store `f32`.
pub type Matrix = nalgebra::DMatrix<f64>;
