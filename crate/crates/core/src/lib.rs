//! Transferable vision transformer for unsupervised domain adaptation.
//!
//! A small ViT whose last layer reweights the class-token attention by
//! per-patch transferabilities, trained against a global and a patch-level
//! domain discriminator plus a mutual-information clustering term. Everything
//! runs on a self-contained reverse-mode autodiff tape in 64-bit floats.

pub mod adversarial;
pub mod checkpoint;
pub mod data;
pub mod dcm;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tam;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use model::TvtModel;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use vit::ModelConfig;
