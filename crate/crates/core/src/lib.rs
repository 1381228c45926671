//! Distributed sparse convex optimization by hybrid outer approximation.
//!
//! A network of nodes each holds a smooth convex loss `f_i`; the solver
//! minimizes `sum_i f_i(x)` subject to `|x|_0 <= kappa`. Lower bounds come
//! from a mixed-integer master problem built out of outer-approximation cuts,
//! upper bounds from fixed-support consensus ADMM solves across the nodes.

pub mod cuts;
pub mod driver;
pub mod engine;
pub mod io;
pub mod master;
pub mod model;
pub mod transport;
