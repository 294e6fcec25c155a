//! Bit-exact binarized neural network inference and statistical soft-error
//! fault injection.
//!
//! The crate models a BNN accelerator's on-chip weight and activation
//! storage as a linear bit-address space, injects single-event and 8-bit
//! multi-bit upsets uniformly across that space and across an inference
//! workload, and measures the resulting classification-accuracy change.
//!
//! - [`tensor`]: packed 1-bit / 2-bit tensors and XNOR-popcount kernels
//! - [`network`]: layer specs, lfc/cnv builders, the forward pass
//! - [`fault`]: memory maps, fault sampling, the read overlay
//! - [`campaign`]: seeded Monte-Carlo trials and summaries
//! - [`model_io`]: model files and MNIST/CIFAR-10 readers
//! - [`train`]: straight-through-estimator training and threshold folding
//! - [`report`]: CSV/JSON emission

mod bits;
pub mod campaign;
pub mod error;
pub mod fault;
pub mod model_io;
pub mod network;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
