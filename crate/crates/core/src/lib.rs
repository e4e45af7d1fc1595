//! Input-space prompt tuning of a frozen 3D/text dual encoder.
//!
//! A point cloud is patchified, scored by a frozen encoder, and prompted by
//! learned per-point offsets on its least informative patches plus a prompt
//! token; the text branch swaps a handcrafted template for learnable context
//! vectors. Training optimizes a cross-entropy objective with prototype,
//! offset-regularization, and text-consistency terms while the dual encoder
//! stays bit-frozen. Everything runs on a small self-contained f64 autodiff
//! engine so gradients can be verified by finite differences.

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod geom;
pub mod losses;
pub mod point_prompter;
pub mod text_prompter;
pub mod rng;
pub mod synthdata;
pub mod wire;

pub use error::{Error, Result};
