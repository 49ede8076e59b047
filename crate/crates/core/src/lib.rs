//! Core of a self-serve ML decision platform.
//!
//! The crate owns the full decision loop for a product use case: declarative
//! onboarding ([`usecase`]), predict/observe event custody ([`eventlog`]),
//! preprocessing and drift statistics ([`prep`]), a small model zoo
//! ([`models`]), automatic configuration ([`autoconf`]), uplift modeling
//! ([`hte`]), decision policies with exact propensities ([`policy`]),
//! counterfactual evaluation ([`offeval`]), offline RL ([`rl`]), product-metric
//! tuning ([`tuning`]), ground-truth simulation ([`simlab`]) and model lifecycle
//! management ([`lifecycle`]).
//!
//! Everything that consumes randomness takes an explicit `u64` seed; results
//! are bit-for-bit reproducible given the same inputs.

pub mod autoconf;
pub mod eventlog;
pub mod features;
pub mod hte;
pub mod lifecycle;
pub mod linalg;
pub mod models;
pub mod offeval;
pub mod policy;
pub mod prep;
pub mod rl;
pub mod rng;
pub mod simlab;
pub mod tuning;
pub mod usecase;

pub use features::{FeatureColumn, FeatureKind, FeatureSchema, FeatureValue, FeatureVector};
pub use usecase::{
    Aggregation, DecisionKind, DecisionSpace, Direction, MetricTiming, ProductMetricSpec, TaskKind,
    UseCaseSpec, ValidatedSpec,
};
