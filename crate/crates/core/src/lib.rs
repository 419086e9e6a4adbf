//! Straggler-resilient federated learning via adaptive node participation.
//!
//! The crate simulates a fleet of clients with heterogeneous compute speeds
//! training a strongly convex model. Training starts with the fastest clients
//! and doubles the cohort each time the current cohort's empirical risk is
//! solved to its statistical accuracy. The simulated wall clock charges every
//! round the time of its slowest participant, which is what makes the
//! fast-first schedule pay off.
//!
//! Module map:
//!
//! * [`losses`]: per-sample losses, empirical risks, curvature and optimum oracles.
//! * [`data`]: synthetic data, CSV ingestion and equal-size partitioning.
//! * [`hetero`]: client speed models and the fast-to-slow fleet ordering.
//! * [`solvers`]: FedGATE / FedAvg / FedNova rounds and stage parameters.
//! * [`flanp`]: the doubling meta-algorithm and its baselines.
//! * [`simclock`]: simulated time accounting and closed-form runtime analysis.

pub mod data;
pub mod error;
pub mod flanp;
pub mod hetero;
pub mod losses;
pub mod simclock;
pub mod solvers;
mod vector;

pub use error::{Error, Result};
