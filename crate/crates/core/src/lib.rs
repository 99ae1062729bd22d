//! Analytical planning and discrete-event simulation for large-scale
//! Mixture-of-Experts training.
//!
//! The crate is organised around the questions a training engineer asks
//! before launching a job:
//!
//! * [`config`] loads model, cluster, job and precision descriptions.
//! * [`commcost`] gives closed-form communication volumes and an alpha-beta
//!   collective latency model on two bandwidth tiers.
//! * [`planner`] enumerates and ranks parallelism plans.
//! * [`memmodel`] accounts per-GPU memory, including selective
//!   activation rematerialization.
//! * [`routing`] simulates token routing, scatter/gather maps and tile
//!   layouts for fused GroupedGEMM kernels.
//! * [`simsched`] builds per-layer operator graphs and schedules them under
//!   serial, inter-operator and intra-operator (tile-fused) overlap.
//! * [`numerics`] emulates BF16/FP8 rounding, quantization and reduction
//!   schemes used for communication compression.
//!
//! Volume formulas are evaluated in exact rational arithmetic ([`Exact`]);
//! conversion to seconds is the only floating-point step.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod commcost;
pub mod config;
pub mod error;
pub mod memmodel;
pub mod numerics;
pub mod planner;
pub mod routing;
pub mod simsched;

mod exact;

pub use error::{Error, Result};
pub use exact::{exact_from_f64, to_f64, Exact};
