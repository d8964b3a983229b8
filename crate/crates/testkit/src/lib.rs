//! Float64 reference implementations used as independent test oracles.
//!
//! Everything here is written as plain nested loops over `Vec<f64>` so the
//! values take a different numerical route than the engine under test
//! (which runs blocked f32 kernels). Used by unit, integration, and
//! acceptance tests; never by library code.

pub mod fd;
pub mod refmodel;
pub mod refops;
pub mod rng;

pub use fd::{central_diff, max_rel_err, rel_err};
pub use rng::{randn, uniform};
