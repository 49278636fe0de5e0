//! Discovery of systems of partial differential equations from gridded data.
//!
//! Single equations are searched by an evolutionary algorithm over term
//! structures with LASSO term filtering; systems are assembled equation by
//! equation, and a MOEA/DD meta-search over the per-equation sparsity
//! constants produces a Pareto frontier of quality/complexity trade-offs.

pub mod cli;
pub mod differentiation;
pub mod equation_ea;
pub mod error;
pub mod grid;
pub mod moeadd;
pub mod sparse_solver;
pub mod synthetic;
pub mod system_builder;
pub mod term_store;
pub mod token_pool;

pub use error::{Error, Result};
