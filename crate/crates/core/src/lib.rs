//! A decision maker learns, from measured data and without the plant model,
//! feedback gains that keep a team stable while one member switches between
//! cooperative and selfish behavior.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: Lyapunov/Riccati solvers, logarithmic norm, vectorization.
//! * [`game`]: team-optimal solution, insider best response, plant modes.
//! * [`augment`]: PI augmentation, equilibria, delayed increments.
//! * [`sim`]: fixed-step switched simulation and learning-data collection.
//! * [`adp`]: data-driven policy iteration and the periodic schedule.
//! * [`scenario`], [`experiment`]: scenario files, runs, and analysis.

// Validation uses `!(x > 0.0)` so that NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adp;
pub mod augment;
pub mod error;
pub mod experiment;
pub mod game;
pub mod linalg;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
