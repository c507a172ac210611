//! Differentiable counting from scored, possibly-overlapping bounding boxes.
//!
//! The centerpiece is [`counter`]: a component that turns `n` attention
//! weights and their bounding boxes into a count scalar and an expanded
//! count feature vector, using only differentiable operations, so that a
//! model can learn to count through it. Overlap handling is driven by the
//! eight learnable monotone piecewise-linear activations in [`plin`].
//!
//! Everything that needs gradients runs through the small reverse-mode
//! tape in [`autodiff`]. [`toygen`] generates the synthetic counting task
//! used to benchmark the component against sum/NMS baselines, and
//! [`train`] holds the three models plus the Adam training loop.
//!
//! The crate is `no_std` (with `alloc`); file IO, the CLI, and plotting
//! live in the companion `boxcount-bench` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod counter;
pub(crate) mod math;
pub mod matrix;
pub mod plin;
pub mod rng;
pub mod toygen;
pub mod train;

pub use counter::{forward, BoundingBox, ComponentInput, ComponentTrace};
pub use matrix::SquareMatrix;
pub use plin::{PlinBank, PlinFunction, PlinRole};
pub use toygen::{ToyConfig, ToySample};
pub use train::{evaluate, train, ModelKind, TrainConfig};
