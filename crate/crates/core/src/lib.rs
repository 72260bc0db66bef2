//! Shortcut-related deep networks and their depth-induced neural tangent kernel.
//!
//! The network adds the activations of every `hbar`-th layer (and the input)
//! into the output. Its depth-induced kernel `NTK_d` pairs the weight
//! gradients of those shortcut layers after left-multiplying them by the
//! transposed weights; [`kernels`] evaluates it both from that definition and
//! from an `O(L)` closed form, and [`oracle`] provides finite-difference
//! references for both.

pub mod data;
pub mod error;
pub mod kernels;
pub mod netarch;
pub mod oracle;
pub mod regression;
pub mod spectrum;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use kernels::{GramMatrix, KernelKind, KernelValue};
pub use netarch::{ActivationSpec, ForwardTrace, Network, NetworkConfig};
pub use training::TrainConfig;
