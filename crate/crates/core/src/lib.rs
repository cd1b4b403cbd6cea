//! Greedy hierarchical variational autoencoders for video prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, convolutions, the conv-GRU
//!   cell, Adam, and the binary tensor file format.
//! * [`distributions`]: diagonal Gaussians, reparameterized sampling, KL.
//! * [`model`]: the module ladder, greedy phase training, rollouts and
//!   checkpoints.
//! * [`data`]: the sprite push-world simulator and episode containers.
//! * [`metrics`], [`planner`], [`memory`]: evaluation, random-shooting visual
//!   foresight, and training-memory accounting.
//! * [`verify`]: finite-difference, Monte Carlo and quadrature oracles.

pub mod data;
pub mod distributions;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod seed;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
