//! Bayesian neural networks where only a chosen subset of the parameters is
//! stochastic.

pub mod blob;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod nn;
pub mod partition;
pub mod predictive;
pub mod rng;
pub mod ucda;

pub use data::{Dataset, Split, Subset, Task};
pub use error::{Error, Result};
pub use inference::{Likelihood, LogDensityModel, PosteriorApproximation};
pub use nn::{Activation, ArchitectureSpec, Network, Parameterization};
pub use partition::{ParameterPartition, PriorSpec};
pub use predictive::{MetricsReport, PredictiveResult};
