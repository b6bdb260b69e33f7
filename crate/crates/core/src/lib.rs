//! Core of the ucorr wire segmentation and depth estimation stack.
//!
//! Everything in this crate is pure computation and only needs `alloc`:
//! a small define-by-run tensor engine with reverse-mode differentiation,
//! the bounded-displacement correlation layer, the twin-encoder network and
//! its ablation variants, the composite training loss, the evaluation
//! metrics, and a procedural scene generator standing in for real flight
//! data. File IO, PNG handling and the command line live in the `ucorr`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod corr;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod tensor_file;
pub mod train;

pub use corr::{correlate_oracle, CorrConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig, Variant};
pub use param::{ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
