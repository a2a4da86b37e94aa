use partial_bnn::nn::{Activation, ArchitectureSpec, Network};
use partial_bnn::rng::stream_rng;
use partial_bnn::ucda::*;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn recovery_exact_for_relu_and_input_noise() {
    let opts = ConstructiveOptions {
        hidden_layers: 3,
        ..ConstructiveOptions::default()
    };
    for tag in [UcdaTag::A, UcdaTag::C, UcdaTag::D] {
        for (d, m) in [(1, 1), (2, 3), (4, 4)] {
            let net = build_constructive_with(tag, d, m, 8, &opts).unwrap();
            let cert = verify_recovery(&net, 10_000, (-3.0, 3.0), 5.0, 7).unwrap();
            assert!(cert.max_recovery_error <= 1e-10, "{tag} d={d} m={m}: {}", cert.max_recovery_error);
            assert_eq!(cert.trials, 10_000);
        }
    }
}

#[test]
fn input_noise_recovery_is_identity() {
    let net = build_constructive(UcdaTag::A, 2, 2, 4).unwrap();
    let cert = verify_recovery(&net, 100, (-1.0, 1.0), 5.0, 0).unwrap();
    assert_eq!(cert.max_recovery_error, 0.0);
}

#[test]
fn certificate_serializes_with_lowercase_tag() {
    let net = build_constructive(UcdaTag::C, 1, 1, 4).unwrap();
    let cert = verify_recovery(&net, 10, (-1.0, 1.0), 5.0, 0).unwrap();
    let json = serde_json::to_value(&cert).unwrap();
    assert_eq!(json["tag"], "c");
    assert_eq!(json["trials"], 10);
}

#[test]
fn ignored_noise_leaves_samples_bit_identical() {
    let spec = ArchitectureSpec::mlp(&[3, 6, 1], Activation::Tanh).unwrap();
    let net = Network::init(spec, &mut stream_rng(3, 1)).unwrap();
    let wide = append_ignored_inputs(&net, 2).unwrap();
    let mut rng = stream_rng(3, 2);
    for _ in 0..200 {
        let x: Vec<f64> = (0..3).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let extra: Vec<f64> = (0..2).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let a = net.forward(&x).unwrap();
        let wx: Vec<f64> = x.iter().chain(&extra).copied().collect();
        let b = wide.forward(&wx).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}

fn sine_grid() -> Vec<Vec<f64>> {
    (0..16).map(|i| vec![-3.0 + 6.0 * i as f64 / 15.0]).collect()
}

fn fitted_moment_errors(std: f64) -> (f64, f64) {
    let net = build_constructive(UcdaTag::C, 1, 1, 64).unwrap();
    let target = SyntheticTarget::GaussianSine { amp: 1.0, freq: 1.0, std };
    let cfg = GeneratorConfig {
        steps: 8000,
        ..GeneratorConfig::default()
    };
    let grid = sine_grid();
    let fit = train_conditional_generator(&net, &target, &grid, &cfg).unwrap();
    assert_eq!(fit.final_distance.len(), grid.len());
    let mut rng = stream_rng(11, 0);
    let (mut mean_err, mut std_err) = (0.0_f64, 0.0_f64);
    for x in &grid {
        let (m, s) = conditional_moments(&fit.net, x, 4000, &mut rng).unwrap();
        mean_err = mean_err.max((m - x[0].sin()).abs());
        if std > 0.0 {
            std_err = std_err.max((s / std - 1.0).abs());
        }
    }
    (mean_err, std_err)
}

#[test]
fn generator_fits_deterministic_sine() {
    let (mean_err, _) = fitted_moment_errors(0.0);
    assert!(mean_err < 0.05, "{mean_err}");
}

#[test]
fn generator_fits_noisy_sine() {
    let (mean_err, std_err) = fitted_moment_errors(0.1);
    assert!(mean_err < 0.05, "{mean_err}");
    assert!(std_err < 0.2, "{std_err}");
}

/// Energy distance between `N(0, s^2)` and a fair `+-1` coin.
fn gaussian_vs_coin(s: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let cross = s * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 / (s * s)).exp() + (1.0 - 2.0 * phi.cdf(-1.0 / s));
    2.0 * cross - 2.0 * s / std::f64::consts::PI.sqrt() - 1.0
}

#[test]
fn generator_beats_single_gaussian_on_bimodal() {
    // A symmetric target makes the zero-mean Gaussian the best single fit.
    let baseline = (1..4000).map(|i| gaussian_vs_coin(i as f64 / 1000.0)).fold(f64::INFINITY, f64::min);
    let net = build_constructive(UcdaTag::C, 1, 1, 32).unwrap();
    let grid: Vec<Vec<f64>> = (0..4).map(|i| vec![-1.0 + 0.6 * i as f64]).collect();
    let cfg = GeneratorConfig {
        distance: Distance::EnergyDistance,
        steps: 8000,
        samples: 128,
        ..GeneratorConfig::default()
    };
    let fit = train_conditional_generator(&net, &SyntheticTarget::Rademacher, &grid, &cfg).unwrap();
    for d in &fit.final_distance {
        assert!(*d < baseline, "{d} vs baseline {baseline}");
    }
}

#[test]
fn construction_layers_stay_frozen() {
    let net = build_constructive(UcdaTag::D, 1, 1, 8).unwrap();
    let cfg = GeneratorConfig {
        steps: 50,
        ..GeneratorConfig::default()
    };
    let target = SyntheticTarget::GaussianSine { amp: 1.0, freq: 1.0, std: 0.1 };
    let fit = train_conditional_generator(&net, &target, &[vec![0.0], vec![1.0]], &cfg).unwrap();
    let layouts = net.network.spec().layouts();
    let frozen = layouts[net.recovery_layer.unwrap()].end();
    assert_eq!(&fit.net.network.theta()[..frozen], &net.network.theta()[..frozen]);
    assert_ne!(&fit.net.network.theta()[frozen..], &net.network.theta()[frozen..]);
    let cert = verify_recovery(&fit.net, 1000, (-3.0, 3.0), 5.0, 0).unwrap();
    assert!(cert.max_recovery_error <= 1e-10);
}

#[test]
fn counterexample_orders_partial_below_full() {
    let r = moment_match_counterexample(&CounterexampleConfig::default()).unwrap();
    assert!(r.partial_err < r.full_err, "{r:?}");
}

#[test]
fn counterexample_without_variance_floor_fits() {
    let r = moment_match_counterexample(&CounterexampleConfig {
        min_sigma: 0.0,
        ..CounterexampleConfig::default()
    })
    .unwrap();
    assert!(r.full_err < 0.1, "{}", r.full_err);
}

#[test]
fn counterexample_partial_fits_deterministic_target() {
    let r = moment_match_counterexample(&CounterexampleConfig {
        target: SyntheticTarget::GaussianSine {
            amp: 1.0,
            freq: 2.0,
            std: 0.0,
        },
        ..CounterexampleConfig::default()
    })
    .unwrap();
    assert!(r.partial_err < 0.05, "{}", r.partial_err);
}
