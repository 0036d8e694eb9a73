//! Introspective transformation networks at desk scale.
//!
//! A B-CNN classifier is trained against two kinds of extra data: positives
//! warped by learned worst-case affine transformations, and pseudo-negatives
//! synthesized by Langevin ascent on the classifier's own score.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod explorer;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod spatial;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Backward, Graph, Var};
pub use tensor::Tensor;
