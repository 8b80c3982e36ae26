//! Building blocks for rehearsal-free domain-incremental learning with a
//! sparse, residual prompt pool:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape
//! - [`entmax`]: α-entmax routing activation and its backward pass
//! - [`routing`]: memory-enhanced queries, subset routing over a frozen/active
//!   prompt pool, class-token injection and the pool's auxiliary losses
//! - [`skp`]: streaming class statistics, teacher heads, distillation and
//!   pseudo-feature replay
//! - [`pudd`]: prompt-usage drift scores and drift-proportional expansion
//! - [`uw`]: learned log-variance loss weighting

pub mod entmax;
pub mod error;
pub mod numerics;
pub mod optim;
pub mod pudd;
pub mod rng;
pub mod routing;
pub mod skp;
pub mod uw;

pub use error::{Error, Result};
pub use numerics::{Gradients, Tape, Tensor, Var};
