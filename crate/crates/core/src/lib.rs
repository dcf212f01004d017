//! Numerical core of a diffusion-based multi-class anomaly detector.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autograd
//! engine, the noise schedule and samplers, the KL autoencoder, the
//! SD/SG denoiser with spatial-aware feature fusion, anomaly scoring and
//! the evaluation metrics. File formats, datasets and the CLI live in the
//! `diad` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autoencoder;
pub mod backbone;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scoring;
pub mod sff;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
