//! Desk-scale testbed for learning to construct Euclidean TSP tours.
//!
//! The crate is organized bottom-up: [`tsp`] defines instances, distance
//! matrices, and tours; [`oracles`] provides exact optima (exhaustive and
//! dynamic-programming), a Lagrangian lower bound, and classical heuristics;
//! [`nn`] is a small reverse-mode autodiff engine; [`policy`] builds an
//! attention-based tour-construction policy on top of it; [`curriculum`]
//! supplies interchangeable training-size sampling strategies behind a
//! registry; [`trainer`] runs REINFORCE with a greedy-rollout baseline; and
//! [`eval`] measures optimality gaps against configurable references.
//!
//! Everything is deterministic given the seeds: instance generation, parameter
//! initialization, rollout sampling, and strategy draws all derive their RNG
//! streams from a master seed, and reductions run in fixed order.

pub mod curriculum;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracles;
pub mod policy;
pub mod seeds;
pub mod solvers;
pub mod trainer;
pub mod tsp;

pub use error::{Error, Result};
