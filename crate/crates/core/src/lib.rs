//! Scene-token compression for multi-camera trajectory prediction.
//!
//! `flex-core` is `no_std` (with `alloc`) and contains everything that is pure
//! computation: a small reverse-mode autodiff engine, a deterministic synthetic
//! driving world, the patchifier, the joint scene encoder and its ablation
//! variants, the waypoint codec, the interleaved policy head, the training
//! objective, driving metrics and the attention-response probes.
//!
//! File formats, the training loop, benchmarking and the CLI live in the `flex`
//! crate, which enables the `std` feature here.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patchify;
pub mod policy;
pub mod rng;
pub mod scene;
pub mod train;
pub mod trajectory;
pub mod worldsim;

pub use error::{Error, Result};
