#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use partial_bnn::inference::{Likelihood, LogDensityModel};
use partial_bnn::nn::{Activation, ArchitectureSpec, Network};
use partial_bnn::partition::{ParameterPartition, PriorSpec};
use partial_bnn::rng::stream_rng;
use partial_bnn::{Subset, Task};
use rand::Rng;
use rand_distr::StandardNormal;

/// Bayesian linear regression `y = X w + e` with `w ~ N(0, prior_var I)`,
/// `e ~ N(0, noise_var I)` and the likelihood raised to `temperature`.
pub struct Conjugate {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_var: f64,
    pub prior_var: f64,
    pub temperature: f64,
}

impl Conjugate {
    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.x.ncols();
        self.x.transpose() * &self.x * (self.temperature / self.noise_var) + DMatrix::identity(d, d) / self.prior_var
    }

    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let cov = self.precision().try_inverse().unwrap();
        let mean = &cov * self.x.transpose() * &self.y * (self.temperature / self.noise_var);
        (mean, cov)
    }

    /// `log N(y | 0, noise_var I + prior_var X X^T)` for `temperature == 1`.
    pub fn log_evidence(&self) -> f64 {
        let n = self.x.nrows();
        let c = DMatrix::identity(n, n) * self.noise_var + &self.x * self.x.transpose() * self.prior_var;
        let chol = c.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let alpha = chol.solve(&self.y);
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + self.y.dot(&alpha))
    }

    pub fn subset(&self) -> Subset {
        let (n, d) = self.x.shape();
        Subset {
            x: Array2::from_shape_fn((n, d), |(i, j)| self.x[(i, j)]),
            y: Array2::from_shape_fn((n, 1), |(i, _)| self.y[i]),
            task: Task::Regression,
        }
    }

    /// A `[d, 1]` network whose weights are stochastic and whose bias is
    /// held at zero.
    pub fn model(&self) -> LogDensityModel {
        let d = self.x.ncols();
        let spec = ArchitectureSpec::mlp(&[d, 1], Activation::Tanh).unwrap();
        let net = Network::zeros(spec).unwrap();
        let mut mask = vec![true; d];
        mask.push(false);
        LogDensityModel::new(
            net,
            ParameterPartition::from_mask(mask),
            PriorSpec::new(self.prior_var).unwrap(),
            Likelihood::gaussian(self.noise_var),
            self.temperature,
            &self.subset(),
        )
        .unwrap()
    }
}

/// Design whose rows have covariance `C^{-1}`, with `C` an equicorrelation
/// matrix at 0.8, so the posterior correlations are close to 0.8.
pub fn conjugate_problem(n: usize, d: usize, seed: u64) -> Conjugate {
    let mut rng = stream_rng(seed, 99);
    let c = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.8 });
    let l = c.try_inverse().unwrap().cholesky().unwrap().l();
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let row = &l * z;
        for j in 0..d {
            x[(i, j)] = row[j];
        }
    }
    let w: Vec<f64> = (0..d).map(|j| 0.5 - 0.4 * j as f64).collect();
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        (0..d).map(|j| x[(i, j)] * w[j]).sum::<f64>() + 0.5 * e
    });
    Conjugate {
        x,
        y,
        noise_var: 0.25,
        prior_var: 1.0,
        temperature: 1.0,
    }
}

pub fn sample_mean_cov(samples: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}
