//! Distributed circle-geometry voltage stability index from PMU phasors.
//!
//! The crate is `no_std` (with `alloc`). It covers grid modelling and
//! admittance assembly ([`netmodel`]), Newton-Raphson and continuation
//! power flow ([`powerflow`]), the circle-based index itself
//! ([`circlevsi`]), a simulation of per-bus agents exchanging neighbour
//! phasors ([`agents`]), and a Thevenin-equivalent baseline
//! ([`baselines`]).

#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod agents;
pub mod baselines;
pub mod circlevsi;
pub mod error;
pub mod netmodel;
pub mod powerflow;

pub use error::{CircleKind, Error, Result};
