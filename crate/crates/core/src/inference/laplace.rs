//! Post hoc Laplace approximation over the stochastic subset with a
//! Gauss-Newton curvature, and its linearized predictive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::model::{softmax, Likelihood, LogDensityModel};
use crate::data::{Subset, Task};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::Rng;

/// Largest stochastic subset for which the dense structure is allowed.
pub const MAX_DENSE_DIM: usize = 5000;
pub const JITTER_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianStructure {
    #[default]
    Diagonal,
    Dense,
}

/// Likelihood curvature over the stochastic subset (prior excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Curvature {
    Diagonal { values: Vec<f64> },
    /// Row-major `dim x dim`.
    Dense { dim: usize, values: Vec<f64> },
}

impl Curvature {
    pub fn dim(&self) -> usize {
        match self {
            Curvature::Diagonal { values } => values.len(),
            Curvature::Dense { dim, .. } => *dim,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Curvature::Diagonal { values } => values.clone(),
            Curvature::Dense { dim, values } => (0..*dim).map(|i| values[i * dim + i]).collect(),
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        match self {
            Curvature::Diagonal { values } => DMatrix::from_diagonal(&DVector::from_column_slice(values)),
            Curvature::Dense { dim, values } => DMatrix::from_row_slice(*dim, *dim, values),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMode {
    #[default]
    Linearized,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceConfig {
    pub structure: HessianStructure,
    /// Defaults to the inverse of the model's effective prior variance.
    pub prior_precision: Option<f64>,
    /// Newton steps on the stochastic subset before fitting.
    pub refine_steps: usize,
    /// Tune the prior precision on the validation set over
    /// [`prior_precision_grid`].
    pub tune_prior_precision: bool,
    pub predictive: PredictiveMode,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            structure: HessianStructure::Diagonal,
            prior_precision: None,
            refine_steps: 0,
            tune_prior_precision: false,
            predictive: PredictiveMode::Linearized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub theta_map_s: Vec<f64>,
    pub curvature: Curvature,
    pub prior_precision: f64,
    pub prior_mean: f64,
    /// Output noise precision for Gaussian likelihoods.
    pub noise_precision: Option<f64>,
}

/// Cholesky factor of `a`, escalating a diagonal jitter on failure.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let n = a.nrows().max(1);
    let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let mut jitter = 1e-8 * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..JITTER_ATTEMPTS {
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(c) = b.cholesky() {
            log::warn!("precision matrix needed jitter {jitter:e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization {
        attempts: JITTER_ATTEMPTS,
    })
}

/// Output-space Hessian of the negative log-likelihood at one output row.
fn output_hessian(likelihood: &Likelihood, out: &[f64], precision: Option<f64>) -> DMatrix<f64> {
    match likelihood {
        Likelihood::Gaussian { .. } => DMatrix::identity(out.len(), out.len()) * precision.unwrap_or(1.0),
        Likelihood::Categorical => {
            let p = softmax(out);
            let mut h = DMatrix::zeros(p.len(), p.len());
            for i in 0..p.len() {
                for j in 0..p.len() {
                    h[(i, j)] = if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] };
                }
            }
            h
        }
    }
}

/// Jacobian of the outputs at row `x` restricted to the stochastic columns.
fn subset_jacobian(net: &Network, x: ndarray::ArrayView1<'_, f64>, stochastic: &[usize]) -> Result<DMatrix<f64>> {
    let j = net.jacobian(x)?;
    let out = j.nrows();
    Ok(DMatrix::from_fn(out, stochastic.len(), |r, c| j[[r, stochastic[c]]]))
}

/// Tempered Gauss-Newton matrix of the likelihood over the stochastic subset.
pub fn gauss_newton(model: &LogDensityModel, net: &Network, structure: HessianStructure) -> Result<Curvature> {
    let stochastic = model.stochastic_indices();
    let k = stochastic.len();
    let precision = model.likelihood().noise_variance().map(|v| 1.0 / v);
    let lambda = model.temperature();
    let outs = net.forward_batch(model.x().view())?;
    match structure {
        HessianStructure::Dense => {
            if k > MAX_DENSE_DIM {
                return Err(Error::InvalidConfig(format!(
                    "dense Laplace needs at most {MAX_DENSE_DIM} stochastic parameters, got {k}"
                )));
            }
            let mut g = DMatrix::zeros(k, k);
            for (i, row) in model.x().rows().into_iter().enumerate() {
                let j = subset_jacobian(net, row, stochastic)?;
                let h = output_hessian(model.likelihood(), &outs.row(i).to_vec(), precision);
                g += j.transpose() * h * &j;
            }
            g *= lambda;
            let g = (&g + g.transpose()) * 0.5;
            let mut values = Vec::with_capacity(k * k);
            for r in 0..k {
                for c in 0..k {
                    values.push(g[(r, c)]);
                }
            }
            Ok(Curvature::Dense { dim: k, values })
        }
        HessianStructure::Diagonal => {
            let mut d = vec![0.0; k];
            for (i, row) in model.x().rows().into_iter().enumerate() {
                let j = subset_jacobian(net, row, stochastic)?;
                let h = output_hessian(model.likelihood(), &outs.row(i).to_vec(), precision);
                let hj = &h * &j;
                for c in 0..k {
                    d[c] += lambda * j.column(c).dot(&hj.column(c));
                }
            }
            Ok(Curvature::Diagonal { values: d })
        }
    }
}

fn model_point(model: &LogDensityModel, theta_s: &[f64]) -> Vec<f64> {
    let mut q = theta_s.to_vec();
    if model.likelihood().learns_precision() {
        let v = model.likelihood().noise_variance().unwrap_or(1.0);
        q.push(-v.ln());
    }
    q
}

/// Fits a Laplace approximation around `map_net`, whose stochastic
/// coordinates are taken as the mode.
pub fn fit_laplace(model: &LogDensityModel, map_net: &Network, config: &LaplaceConfig) -> Result<LaplacePosterior> {
    let stochastic = model.stochastic_indices().to_vec();
    if stochastic.is_empty() {
        return Err(Error::EmptyStochasticSet("Laplace needs at least one stochastic parameter"));
    }
    if map_net.spec() != model.base().spec() {
        return Err(Error::InvalidConfig("MAP network architecture differs from the model".into()));
    }
    let model = model.with_base(map_net.clone())?;
    let prior_precision = config.prior_precision.unwrap_or(1.0 / model.prior_variance());
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidConfig(format!("prior precision {prior_precision} must be positive")));
    }
    let mut theta_s: Vec<f64> = stochastic.iter().map(|&i| map_net.theta()[i]).collect();
    let noise_precision = model.likelihood().noise_variance().map(|v| 1.0 / v);
    for _ in 0..config.refine_steps {
        let q = model_point(&model, &theta_s);
        let net = model.assemble(&q)?;
        // Likelihood gradient at the fixed noise, plus the prior at the
        // precision being fitted.
        let eval = model.likelihood_eval(&net, noise_precision, None)?;
        let grad = DVector::from_iterator(
            stochastic.len(),
            stochastic
                .iter()
                .zip(&theta_s)
                .map(|(&i, t)| eval.grad_theta[i] - prior_precision * (t - model.prior().mean)),
        );
        let mut p = gauss_newton(&model, &net, HessianStructure::Dense)?.dense();
        for i in 0..p.nrows() {
            p[(i, i)] += prior_precision;
        }
        let step = cholesky_with_jitter(&p)?.solve(&grad);
        for (t, s) in theta_s.iter_mut().zip(step.iter()) {
            *t += s;
        }
    }
    let q = model_point(&model, &theta_s);
    let net = model.assemble(&q)?;
    let curvature = gauss_newton(&model, &net, config.structure)?;
    let post = LaplacePosterior {
        theta_map_s: theta_s,
        curvature,
        prior_precision,
        prior_mean: model.prior().mean,
        noise_precision,
    };
    post.precision_cholesky()?;
    Ok(post)
}

/// Linearized predictive moments: output means `[n x out]` and per-point
/// output covariances (noise excluded).
#[derive(Debug, Clone)]
pub struct LinearizedPredictive {
    pub mean: Array2<f64>,
    pub cov: Vec<DMatrix<f64>>,
}

impl LinearizedPredictive {
    /// Per-output variance, `[n x out]`.
    pub fn variance(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.mean.dim(), |(i, j)| self.cov[i][(j, j)].max(0.0))
    }

    /// Class probabilities under the probit approximation.
    pub fn probit_probabilities(&self) -> Array2<f64> {
        let mut p = Array2::zeros(self.mean.dim());
        for (i, row) in self.mean.rows().into_iter().enumerate() {
            let z: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, m)| m / (1.0 + PI * self.cov[i][(j, j)].max(0.0) / 8.0).sqrt())
                .collect();
            for (j, v) in softmax(&z).into_iter().enumerate() {
                p[[i, j]] = v;
            }
        }
        p
    }
}

impl LaplacePosterior {
    pub fn dim(&self) -> usize {
        self.theta_map_s.len()
    }

    pub fn structure(&self) -> HessianStructure {
        match self.curvature {
            Curvature::Diagonal { .. } => HessianStructure::Diagonal,
            Curvature::Dense { .. } => HessianStructure::Dense,
        }
    }

    pub fn with_prior_precision(&self, prior_precision: f64) -> Self {
        let mut p = self.clone();
        p.prior_precision = prior_precision;
        p
    }

    /// Posterior precision `GGN + prior_precision * I`.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut p = self.curvature.dense();
        for i in 0..p.nrows() {
            p[(i, i)] += self.prior_precision;
        }
        p
    }

    pub fn precision_diagonal(&self) -> Vec<f64> {
        self.curvature.diagonal().into_iter().map(|g| g + self.prior_precision).collect()
    }

    fn precision_cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        cholesky_with_jitter(&self.precision())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        match &self.curvature {
            Curvature::Diagonal { .. } => {
                let d = self.precision_diagonal();
                if d.iter().any(|v| *v <= 0.0) {
                    return Err(Error::Factorization { attempts: 0 });
                }
                Ok(DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|v| 1.0 / v))))
            }
            Curvature::Dense { .. } => Ok(self.precision_cholesky()?.inverse()),
        }
    }

    pub fn marginal_variances(&self) -> Result<Vec<f64>> {
        match &self.curvature {
            Curvature::Diagonal { .. } => Ok(self.precision_diagonal().iter().map(|v| 1.0 / v).collect()),
            Curvature::Dense { .. } => Ok(self.covariance()?.diagonal().iter().copied().collect()),
        }
    }

    /// Draws `theta_S` from the Gaussian.
    pub fn sample(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let k = self.dim();
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let delta = match &self.curvature {
            Curvature::Diagonal { .. } => {
                let d = self.precision_diagonal();
                DVector::from_iterator(k, z.iter().zip(&d).map(|(zi, p)| zi / p.sqrt()))
            }
            Curvature::Dense { .. } => {
                // precision = L L^T, so L^{-T} z has covariance precision^{-1}.
                let l = self.precision_cholesky()?.l();
                l.transpose()
                    .solve_upper_triangular(&z)
                    .ok_or(Error::Factorization { attempts: 0 })?
            }
        };
        Ok(self.theta_map_s.iter().zip(delta.iter()).map(|(t, d)| t + d).collect())
    }

    fn network(&self, template: &Network, stochastic: &[usize]) -> Result<Network> {
        if stochastic.len() != self.dim() {
            return Err(Error::dims("Laplace posterior", stochastic.len(), self.dim()));
        }
        let mut net = template.clone();
        let t = net.theta_mut();
        for (&i, &v) in stochastic.iter().zip(&self.theta_map_s) {
            t[i] = v;
        }
        Ok(net)
    }

    /// Linearized predictive at the rows of `x`.
    pub fn linearized(&self, template: &Network, stochastic: &[usize], x: ArrayView2<'_, f64>) -> Result<LinearizedPredictive> {
        let net = self.network(template, stochastic)?;
        let mean = net.forward_batch(x)?;
        let sigma = self.covariance()?;
        let mut cov = Vec::with_capacity(x.nrows());
        for row in x.rows() {
            let j = subset_jacobian(&net, row, stochastic)?;
            cov.push(&j * &sigma * j.transpose());
        }
        Ok(LinearizedPredictive { mean, cov })
    }
}

/// `logspace(1e-2, 1e5, 125)`.
pub fn prior_precision_grid() -> Vec<f64> {
    log_grid(1e-2, 1e5, 125)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else if i == 0 {
                lo
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Validation NLL of the linearized predictive for each prior precision in
/// `grid`, computed from one eigendecomposition of the curvature.
pub fn prior_precision_profile(
    laplace: &LaplacePosterior,
    template: &Network,
    stochastic: &[usize],
    likelihood: &Likelihood,
    validation: &Subset,
    grid: &[f64],
) -> Result<Vec<f64>> {
    if validation.is_empty() {
        return Err(Error::EmptyData("validation set"));
    }
    let net = laplace.network(template, stochastic)?;
    let means = net.forward_batch(validation.x.view())?;
    let (eigvals, basis) = match &laplace.curvature {
        Curvature::Diagonal { values } => (values.clone(), None),
        Curvature::Dense { .. } => {
            let e = SymmetricEigen::new(laplace.curvature.dense());
            (e.eigenvalues.iter().map(|v| v.max(0.0)).collect(), Some(e.eigenvectors))
        }
    };
    // Projected Jacobians J Q for every validation point.
    let mut projected = Vec::with_capacity(validation.len());
    for row in validation.x.rows() {
        let j = subset_jacobian(&net, row, stochastic)?;
        projected.push(match &basis {
            Some(q) => j * q,
            None => j,
        });
    }
    let noise_var = likelihood.noise_variance();
    let mut profile = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let mut total = 0.0;
        for (i, jq) in projected.iter().enumerate() {
            let out = jq.nrows();
            let mut cov = DMatrix::zeros(out, out);
            for c in 0..jq.ncols() {
                let col = jq.column(c);
                cov += col * col.transpose() / (eigvals[c] + alpha);
            }
            let m = means.row(i);
            total += match validation.task {
                Task::Regression => {
                    let nv = noise_var.unwrap_or(0.0);
                    (0..out)
                        .map(|o| {
                            let v = cov[(o, o)].max(0.0) + nv;
                            0.5 * (2.0 * PI * v).ln() + 0.5 * (validation.y[[i, o]] - m[o]).powi(2) / v
                        })
                        .sum::<f64>()
                }
                Task::Classification { .. } => {
                    let z: Vec<f64> = (0..out)
                        .map(|o| m[o] / (1.0 + PI * cov[(o, o)].max(0.0) / 8.0).sqrt())
                        .collect();
                    let p = softmax(&z);
                    -p[validation.y[[i, 0]] as usize].max(f64::MIN_POSITIVE).ln()
                }
            };
        }
        profile.push(total / validation.len() as f64);
    }
    Ok(profile)
}

/// Grid point with the lowest validation NLL; ties go to the smaller
/// precision.
pub fn tune_prior_precision(
    laplace: &LaplacePosterior,
    template: &Network,
    stochastic: &[usize],
    likelihood: &Likelihood,
    validation: &Subset,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty prior precision grid".into()));
    }
    let profile = prior_precision_profile(laplace, template, stochastic, likelihood, validation, grid)?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        let v = profile[i];
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((grid[i], v));
        }
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::InvalidConfig("prior precision sweep produced only NaN".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ArchitectureSpec};
    use crate::partition::{ParameterPartition, PriorSpec};
    use crate::rng::stream_rng;

    fn toy() -> (LogDensityModel, Network) {
        let spec = ArchitectureSpec::mlp(&[2, 1], Activation::Relu).unwrap();
        let x = Array2::from_shape_fn((6, 2), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 3.0 - 1.0);
        let y = Array2::from_shape_fn((6, 1), |(i, _)| 0.3 * i as f64 - 0.5);
        let data = Subset {
            x,
            y,
            task: Task::Regression,
        };
        let net = Network::new(spec, vec![0.1, -0.2, 0.05]).unwrap();
        let m = LogDensityModel::new(
            net.clone(),
            ParameterPartition::all(3),
            PriorSpec::new(2.0).unwrap(),
            Likelihood::gaussian(0.25),
            1.0,
            &data,
        )
        .unwrap();
        (m, net)
    }

    #[test]
    fn grid_bounds() {
        let g = prior_precision_grid();
        assert_eq!(g.len(), 125);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[124], 1e5);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn diagonal_equals_dense_diagonal() {
        let (m, net) = toy();
        let dense = gauss_newton(&m, &net, HessianStructure::Dense).unwrap();
        let diag = gauss_newton(&m, &net, HessianStructure::Diagonal).unwrap();
        for (a, b) in dense.diagonal().iter().zip(diag.diagonal()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_shrinks_with_prior_precision() {
        let (m, net) = toy();
        let cfg = LaplaceConfig::default();
        let post = fit_laplace(&m, &net, &cfg).unwrap();
        let mut prev = vec![f64::INFINITY; 3];
        for a in [0.1, 1.0, 10.0, 1e3, 1e6] {
            let v = post.with_prior_precision(a).marginal_variances().unwrap();
            for (p, c) in prev.iter().zip(&v) {
                assert!(c < p);
            }
            prev = v;
        }
        assert!(prev.iter().all(|v| *v < 1e-5));
    }

    #[test]
    fn single_point_grid() {
        let (m, net) = toy();
        let post = fit_laplace(&m, &net, &LaplaceConfig::default()).unwrap();
        let data = Subset {
            x: m.x().clone(),
            y: m.y().clone(),
            task: Task::Regression,
        };
        let a = tune_prior_precision(&post, &net, &[0, 1, 2], m.likelihood(), &data, &[3.5]).unwrap();
        assert_eq!(a, 3.5);
    }

    #[test]
    fn dense_sampling_matches_covariance() {
        let (m, net) = toy();
        let cfg = LaplaceConfig {
            structure: HessianStructure::Dense,
            ..LaplaceConfig::default()
        };
        let post = fit_laplace(&m, &net, &cfg).unwrap();
        let cov = post.covariance().unwrap();
        let mut rng = stream_rng(5, 0);
        let n = 40_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| post.sample(&mut rng).unwrap()).collect();
        for a in 0..3 {
            for b in 0..3 {
                let ma = post.theta_map_s[a];
                let mb = post.theta_map_s[b];
                let c = draws.iter().map(|d| (d[a] - ma) * (d[b] - mb)).sum::<f64>() / n as f64;
                let scale = (cov[(a, a)] * cov[(b, b)]).sqrt();
                assert!((c - cov[(a, b)]).abs() < 0.03 * scale, "{a}{b}: {c} vs {}", cov[(a, b)]);
            }
        }
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(&a).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&bad), Err(Error::Factorization { attempts: 3 })));
    }
}
