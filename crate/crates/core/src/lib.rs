//! Data assimilation with stochastic interpolants.
//!
//! A drift network learns the one-step transition `p(x_{k+1} | x_k)` of a
//! dynamical system by regressing onto the velocity of a stochastic
//! interpolant bridging consecutive states. At inference time the learned SDE
//! is integrated over the interpolation grid and nudged toward incoming
//! observations with a Monte-Carlo estimate of the likelihood gradient.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. With `std`, batch work is spread over a rayon pool; every
//! reduction runs in a fixed chunk order, so results do not depend on the
//! number of worker threads.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod assimilate;
pub mod bpf;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod interpolant;
mod linalg;
pub mod metrics;
pub mod net;
mod par;
pub mod rng;
pub mod state;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use state::{ObservationSeries, StateVector, Trajectory};
