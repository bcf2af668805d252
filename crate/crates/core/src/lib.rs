//! Continuous-time causal inference on event histories.
//!
//! A [`scenario::ScenarioSpec`] describes baseline variables and a finite
//! set of counting-process modules. [`simulate`] draws factual and
//! counterfactual cohorts, [`weights`] computes likelihood-ratio weights
//! for interventions, [`estimators`] fits Aalen additive hazards and the
//! sequential G-estimator, and [`identify`] evaluates the baseline
//! g-formula against a truncated-factorization oracle. [`study`] bundles
//! the dynamic mediation study used by the acceptance suite.

pub mod cli;
pub mod estimators;
pub mod events;
pub mod expr;
pub mod graph;
pub mod identify;
pub mod io;
pub mod scenario;
pub mod simulate;
pub mod study;
pub mod table;
pub mod weights;
