//! Inference backends over the stochastic subset of a network.

pub mod hmc;
pub mod laplace;
pub mod map;
pub mod mfvi;
pub mod model;
pub mod optim;
pub mod posterior;
pub mod swag;

pub use hmc::{run_hmc, Chain, HmcConfig, LogDensity, SampleSet};
pub use laplace::{fit_laplace, tune_prior_precision, HessianStructure, LaplaceConfig, LaplacePosterior, PredictiveMode};
pub use map::{point_nll, train_map, MapConfig, MapOutcome};
pub use mfvi::{train_mfvi, MeanFieldGaussian, MfviConfig, MfviOutcome};
pub use model::{softmax, Likelihood, LogDensityModel, NoiseModel};
pub use optim::AdamW;
pub use posterior::PosteriorApproximation;
pub use swag::{fit_swag, SwagConfig, SwagOutcome, SwagPosterior};
