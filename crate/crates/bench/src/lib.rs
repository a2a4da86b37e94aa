//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use partial_bnn::data::gen_sine_small;
use partial_bnn::diagnostics::ChainPredictions;
use partial_bnn::rng::stream_rng;
use partial_bnn::{Activation, ArchitectureSpec, Likelihood, LogDensityModel, Network, ParameterPartition, PriorSpec};
use rand::Rng;

/// A 1-`hidden`-`hidden`-1 SiLU network on the small sine data, with the
/// first `stochastic` parameters sampled.
pub fn sine_model(hidden: usize, stochastic: Option<usize>) -> LogDensityModel {
    let data = gen_sine_small(0).expect("sine data");
    let spec = ArchitectureSpec::mlp(&[1, hidden, hidden, 1], Activation::Silu).expect("spec");
    let net = Network::init(spec, &mut stream_rng(0, 1)).expect("init");
    let p = net.num_params();
    let partition = match stochastic {
        Some(k) => ParameterPartition::from_mask((0..p).map(|i| i < k).collect()),
        None => ParameterPartition::from_mask(vec![true; p]),
    };
    LogDensityModel::new(
        net,
        partition,
        PriorSpec::new(1.0).expect("prior"),
        Likelihood::gaussian(0.0025),
        1.0,
        &data.train(),
    )
    .expect("model")
}

/// Random class probabilities for `chains` chains.
pub fn random_chains(chains: usize, points: usize, classes: usize) -> ChainPredictions {
    let mut rng = stream_rng(0, 2);
    let c = (0..chains)
        .map(|_| Array2::from_shape_fn((points, classes), |_| rng.random::<f64>()))
        .collect();
    ChainPredictions::new(c).expect("chains")
}
