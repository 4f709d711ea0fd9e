//! Higher-order score-function estimators over scalar stochastic computation
//! graphs.
//!
//! The crate is layered bottom-up:
//!
//! - [`graph`]: expression DAG, stop-gradient, symbolic differentiation of
//!   any order, and compiled evaluation.
//! - [`scg`] and [`dists`]: stochastic and cost nodes on top of the DAG.
//! - [`estimators`]: the MagicBox objective and the estimators it is compared
//!   against, Hessian-vector products, Monte-Carlo estimation.
//! - [`oracle`]: exhaustive enumeration and finite differences.
//! - [`ipd`] and [`lola`]: the iterated prisoner's dilemma and the learners
//!   built on it.

pub mod config;
pub mod dists;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod graph;
pub mod ipd;
pub mod lola;
pub mod oracle;
pub mod scg;
pub mod stats;

pub use error::{Error, Result};
pub use graph::{Binding, GraphArena, NodeId, NodeKind, ParamId, SampleBatch, SampleRecord, StochId};
pub use scg::{CostId, Scg};
