//! Sequential Bayesian inference with finite-atom priors, and numerical
//! checks of posterior and predictive convergence rates in four data regimes:
//! iid, misspecified iid, independent non-identically distributed, and
//! Markov.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergences;
pub mod experiments;
pub mod geometry;
pub mod inference;
pub mod models;
pub mod numeric;
