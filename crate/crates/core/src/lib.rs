//! Lyapunov-constrained soft actor-critic for planar quadrotor tracking.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`sim`] — deterministic planar quadrotor simulator with reference
//!    trajectories and a shaped tracking reward.
//! 2. [`pid`] — a cascaded PD tracking controller used to collect the
//!    identification dataset.
//! 3. [`edmd`] — extended dynamic mode decomposition: fits a lifted linear
//!    surrogate `z⁺ = A z + B u` of the tracking-error dynamics.
//! 4. [`clf`] — discrete-time Riccati solution on the surrogate, yielding a
//!    quadratic Lyapunov candidate and a per-sample decrease condition.
//! 5. [`nn`] — a small reverse-mode differentiation engine (dense layers,
//!    squashed-Gaussian policy head, Adam).
//! 6. [`sac`] — baseline soft actor-critic built on [`nn`].
//! 7. [`constraint`] — the Lagrangian constraint layer that couples the
//!    Lyapunov decrease condition into the actor update.
//! 8. [`harness`] — experiment orchestration: data collection, training
//!    loops, evaluation, metric export.

pub mod clf;
pub mod config;
pub mod constraint;
pub mod edmd;
pub mod error;
pub mod harness;
pub mod nn;
pub mod pid;
pub mod sac;
pub mod sim;

pub use error::{Error, Result};
