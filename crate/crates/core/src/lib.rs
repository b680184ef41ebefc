//! SimA: softmax-free attention with per-channel ℓ1 normalization.
//!
//! The crate bundles the attention kernels (SimA plus MSA, XCA and
//! `1 + elu` linear attention baselines), a small reverse-mode autodiff
//! tape, a toy vision-transformer classifier trained through it, a
//! microbenchmark harness and saliency-map export. Every forward kernel
//! reports its transcendental and multiply-add counts through [`Cost`].

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod cost;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod viz;

pub use cost::{Cost, CostReport, OrderingUsed, ProductOrder};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};
