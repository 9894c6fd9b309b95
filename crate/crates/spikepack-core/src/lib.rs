//! Compression toolkit for spiking neural networks targeting neuromorphic
//! deployment constraints: limited unique synaptic states, low bit-width
//! weight storage, and tight neuron/synapse budgets.
//!
//! The crate provides a deterministic f64 tensor engine with reverse-mode
//! differentiation, discrete-time LIF dynamics with a surrogate spike
//! gradient, clusterization-aware training with per-layer learnable
//! codebooks, Fisher-style structured channel pruning, ternary and
//! clustered compression baselines, and the deployability metrics used to
//! compare them. Everything here is pure computation; file formats, the
//! command line, and wall-clock measurements live in the companion
//! `spikepack-cli` crate.
//!
//! The crate is `no_std` (with `alloc`); float math goes through `libm`
//! so results are bit-reproducible for a fixed seed.

#![no_std]

extern crate alloc;

pub mod codebook;
pub mod data;
pub mod error;
pub(crate) mod fmath;
pub mod kmeans;
pub mod lif;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod ternary;
pub mod train;
pub mod unroll;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
