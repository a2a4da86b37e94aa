use ndarray::{array, Array2};
use partial_bnn::inference::hmc::SampleSet;
use partial_bnn::inference::{MeanFieldGaussian, PosteriorApproximation};
use partial_bnn::nn::{Activation, ArchitectureSpec, Network};
use partial_bnn::partition::ParameterPartition;
use partial_bnn::predictive::{
    accuracy, ece, interval_coverage, nll, predict, predict_point, PredictiveResult, ECE_BINS,
};
use partial_bnn::rng::stream_rng;
use partial_bnn::Task;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, Normal};

fn inv_softplus(s: f64) -> f64 {
    (s.exp() - 1.0).ln()
}

fn classification(p: Array2<f64>) -> PredictiveResult {
    PredictiveResult {
        task: Task::Classification { n_classes: p.ncols() },
        mean: p.clone(),
        variance: None,
        epistemic_variance: None,
        probabilities: Some(p),
        samples_used: 1,
        mode: "mc".into(),
    }
}

#[test]
fn mc_class_probabilities_match_quadrature() {
    // Logits are the two output weights at x = 1, biases fixed at zero.
    let spec = ArchitectureSpec::mlp(&[1, 2], Activation::Tanh).unwrap();
    let net = Network::zeros(spec).unwrap();
    let part = ParameterPartition::from_mask(vec![true, true, false, false]);
    let (m, s) = ([0.4, -0.3], [0.8, 1.1]);
    let q = MeanFieldGaussian::new(m.to_vec(), s.iter().map(|v| inv_softplus(*v)).collect()).unwrap();
    let post = PosteriorApproximation::MeanField(q);
    let x = array![[1.0]];
    let pred = predict(&net, &part, &post, x.view(), 10_000, Task::Classification { n_classes: 2 }, 1.0, 4).unwrap();
    let p1 = pred.probabilities.unwrap()[[0, 1]];
    // p(class 1) = E[sigmoid(z1 - z0)] with z1 - z0 Gaussian.
    let (dm, ds) = (m[1] - m[0], (s[0] * s[0] + s[1] * s[1]).sqrt());
    let gauss = Normal::new(dm, ds).unwrap();
    let (lo, hi, n) = (dm - 12.0 * ds, dm + 12.0 * ds, 20_000);
    let h = (hi - lo) / n as f64;
    let oracle: f64 = (0..=n)
        .map(|i| {
            let z = lo + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * h * gauss.pdf(z) / (1.0 + (-z).exp())
        })
        .sum();
    assert!((p1 / oracle - 1.0).abs() < 0.02, "{p1} vs {oracle}");
}

#[test]
fn point_mass_posterior_is_forward_pass() {
    let spec = ArchitectureSpec::mlp(&[2, 4, 1], Activation::Tanh).unwrap();
    let net = Network::init(spec, &mut stream_rng(1, 1)).unwrap();
    let part = ParameterPartition::from_mask((0..net.num_params()).map(|i| i % 3 == 0).collect());
    let theta_s = part.gather(net.theta()).unwrap();
    let mut set = SampleSet::point(theta_s.clone());
    for _ in 0..4 {
        set.chains[0].samples.push(theta_s.clone());
    }
    let x = array![[0.3, -1.0], [2.0, 0.5]];
    let pred = predict(&net, &part, &PosteriorApproximation::Samples(set), x.view(), 0, Task::Regression, 0.2, 0).unwrap();
    let direct = predict_point(&net, x.view(), Task::Regression, 0.2).unwrap();
    assert_eq!(pred.samples_used, 5);
    for i in 0..2 {
        assert_eq!(pred.mean[[i, 0]], net.forward(&x.row(i).to_vec()).unwrap()[0]);
        assert_eq!(pred.mean[[i, 0]], direct.mean[[i, 0]]);
        assert_eq!(pred.variance.as_ref().unwrap()[[i, 0]], 0.2);
    }
}

#[test]
fn two_sigma_coverage_of_gaussian_data() {
    let n = 100_000;
    let mut rng = stream_rng(2, 0);
    let y = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
    let pred = PredictiveResult {
        task: Task::Regression,
        mean: Array2::zeros((n, 1)),
        variance: Some(Array2::ones((n, 1))),
        epistemic_variance: Some(Array2::zeros((n, 1))),
        probabilities: None,
        samples_used: 1,
        mode: "mc".into(),
    };
    let cov = interval_coverage(&pred, y.view(), &[2.0]).unwrap()[0];
    assert!((cov - 0.9545).abs() < 0.004, "{cov}");
}

#[test]
fn ece_of_calibrated_bins_is_small() {
    // In every bin the labels agree with the argmax at the stated confidence.
    let per_bin = 30;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for b in 8..ECE_BINS {
        let c = (b as f64 + 0.5) / ECE_BINS as f64;
        let correct = (c * per_bin as f64).round() as usize;
        for k in 0..per_bin {
            rows.push([c, 1.0 - c]);
            labels.push(if k < correct { 0.0 } else { 1.0 });
        }
    }
    let p = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
    let y = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i]);
    let e = ece(&classification(p), y.view()).unwrap();
    assert!(e <= 1.0 / (2.0 * ECE_BINS as f64), "{e}");
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = stream_rng(seed, 0);
        let raw = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() + 1e-3);
        let p = Array2::from_shape_fn((n, 3), |(i, j)| raw[[i, j]] / raw.row(i).sum());
        let y = Array2::from_shape_fn((n, 1), |_| rng.random_range(0..3) as f64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(n / 3);
        let pp = p.select(ndarray::Axis(0), &perm);
        let yp = y.select(ndarray::Axis(0), &perm);
        let (a, b) = (classification(p), classification(pp));
        prop_assert!((nll(&a, y.view()).unwrap() - nll(&b, yp.view()).unwrap()).abs() < 1e-12);
        prop_assert_eq!(accuracy(&a, y.view()).unwrap(), accuracy(&b, yp.view()).unwrap());
        let e = ece(&a, y.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        // Hand-rolled -log p[y].
        let hand: f64 = (0..n).map(|i| -a.probabilities.as_ref().unwrap()[[i, y[[i, 0]] as usize]].ln()).sum::<f64>() / n as f64;
        prop_assert!((nll(&a, y.view()).unwrap() - hand).abs() < 1e-12);
    }
}
