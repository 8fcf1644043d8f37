//! Estimation and inference for counterfactual functionals of the treated
//! under the multiplicative instrumental-variable model.
//!
//! The target is any parameter `β*` solving a counterfactual moment equation
//! `E[M(Y⁰, β) | A = 1] = 0` — the mean, a quantile, or a CDF value of the
//! treatment-free outcome among treated units. Identification rests on a
//! binary instrument whose effect on treatment uptake is multiplicative in
//! the unmeasured confounder. The crate provides:
//!
//! - [`dataset`]: CSV ingestion, validation, and fold plans for cross-fitting.
//! - [`moments`]: the moment-function families and their affine-in-β
//!   decompositions used to share fitted regressions across a β grid.
//! - [`learners`]: small deterministic regression/probability learners
//!   (ridge-logistic, boosted stumps, constants, stacking).
//! - [`nuisance`]: fitting and clipped evaluation of the six nuisance
//!   functions (ρ, π₁, μ₀, μ₁, λ₀, λ₁).
//! - [`eif`]: the efficient influence function, per-fold estimates, and the
//!   cross-fitted estimator with its variance.
//! - [`law`]: finite discrete laws with exact enumeration of the identified
//!   functional, the influence function, the second-order remainder, and the
//!   multiple-robustness checks — the oracle layer the tests are built on.
//! - [`inference`]: confidence intervals for the moment value and
//!   test-inversion confidence sets for `β*`, plus the ATT closed form and
//!   the direct QTT moment.
//! - [`sim`]: data-generating processes, ground-truth computation, and the
//!   coverage experiment harness.
//!
//! All estimation paths are deterministic given a seed, independent of the
//! rayon worker count: reductions use fixed-order pairwise summation and
//! per-unit seeds are derived by counter.

pub mod dataset;
pub mod eif;
pub mod error;
pub mod inference;
pub mod law;
pub mod learners;
pub mod moments;
pub mod nuisance;
pub mod numeric;
pub mod sim;

pub use error::{Error, Result};
