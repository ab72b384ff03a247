//! Self-certifying primal-dual optimization proxies for DC economic dispatch.
//!
//! A primal network predicts a dispatch that is repaired onto the feasible
//! set; a dual network predicts the power-balance and flow prices that are
//! completed into a dual-feasible point. The duality gap of the pair is a
//! certificate of optimality computed without any solver call. The hybrid
//! solver accepts a prediction whenever its normalized gap is below a user
//! tolerance and falls back to an exact lazy-constraint simplex otherwise.
//!
//! Modules:
//! - [`grid`]: case files, validation, PTDF.
//! - [`ed_model`]: primal/dual points, objectives, gaps, feasibility checks.
//! - [`lp_solver`]: bounded-variable simplex, full and lazy dispatch solves.
//! - [`nn`]: MLPs with batch-norm, softplus, bounded outputs, Adam.
//! - [`proxies`]: feasibility layers turning network outputs into points.
//! - [`training`]: label-free joint training.
//! - [`hybrid`]: certify-or-fallback inference and speedup accounting.

// `!(x >= 0.0)` rejects NaN along with negatives; that is the intent everywhere.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cases;
pub mod ed_model;
pub mod grid;
pub mod hybrid;
pub mod lp_solver;
pub mod nn;
pub mod proxies;
pub mod rng;
pub mod training;
