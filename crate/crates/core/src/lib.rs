// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod matrix;
pub mod nipa;
pub mod nn;
pub mod optim;
pub mod pool;
pub mod surrogate;
pub mod synthetic;
pub mod targets;

// std's clock panics on wasm32-unknown-unknown.
#[cfg(not(target_arch = "wasm32"))]
pub(crate) use std::time::Instant;
#[cfg(target_arch = "wasm32")]
pub(crate) use web_time::Instant;
