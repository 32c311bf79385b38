//! Neural vector fields constrained to manifolds.
//!
//! The crate covers three ways of learning `u' = f(u)` when the true
//! trajectories satisfy `g(u) = 0`: an unconstrained network, a network
//! with a restoring term `-γ Dg⁺ g`, and a network whose output is projected
//! onto the tangent space of the constraint set. Supporting pieces are a
//! small reverse-mode tape, RK4 and Dormand-Prince integrators, three
//! benchmark systems and a training loop.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod solvers;
pub mod systems;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use manifold::ConstraintSet;
pub use models::{FieldKind, FieldSpec, MlpParams};
pub use parallel::Parallelism;
pub use solvers::{AdaptiveOptions, SolveStats, Trajectory};
pub use systems::{System, SystemConfig};
pub use tape::{NodeId, Tape};
