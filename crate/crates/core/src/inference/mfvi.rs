//! Mean-field Gaussian variational inference over the stochastic subset,
//! trained jointly with the deterministic parameters.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::map::epoch_batches;
use super::model::{pointwise_log_likelihood, LogDensityModel};
use super::optim::AdamW;
use crate::data::Subset;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Network};
use crate::rng::{stream_rng, streams, Rng};

/// Lower bound on `rho`; keeps `softplus(rho)` away from underflow.
pub const RHO_FLOOR: f64 = -20.0;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `KL(N(mu, sigma^2) || N(m, v))`.
pub fn gaussian_kl(mu: f64, sigma: f64, m: f64, v: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * (s2 / v + (mu - m).powi(2) / v - 1.0 - (s2 / v).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MeanFieldGaussian {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::dims("rho", mu.len(), rho.len()));
        }
        Ok(Self { mu, rho })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| m + softplus(*r) * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// KL divergence to an isotropic Gaussian prior.
    pub fn kl_to_prior(&self, mean: f64, variance: f64) -> f64 {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| gaussian_kl(*m, softplus(*r), mean, variance))
            .sum()
    }

    /// Gradients of the KL with respect to `mu` and `rho`.
    pub fn kl_grad(&self, mean: f64, variance: f64) -> (Vec<f64>, Vec<f64>) {
        let gm = self.mu.iter().map(|m| (m - mean) / variance).collect();
        let gr = self
            .rho
            .iter()
            .map(|&r| {
                let s = softplus(r);
                (s / variance - 1.0 / s) * sigmoid(r)
            })
            .collect();
        (gm, gr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfviConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled decay, applied to deterministic parameters only.
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    pub mc_samples: usize,
    /// The KL weight rises linearly from 0 to 1 over this many epochs.
    pub kl_anneal_epochs: usize,
    /// When set, `mu` starts at `N(0, mu_init_std^2)`; otherwise at the base
    /// network's values.
    pub mu_init_std: Option<f64>,
    pub rho_init_mean: f64,
    pub rho_init_std: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for MfviConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: None,
            mc_samples: 1,
            kl_anneal_epochs: 0,
            mu_init_std: None,
            rho_init_mean: -3.0,
            rho_init_std: 0.1,
            eval_every: 50,
            eval_samples: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MfviOutcome {
    pub posterior: MeanFieldGaussian,
    /// Network with trained deterministic parameters and `theta_S = mu`.
    pub network: Network,
    pub best_epoch: usize,
    pub best_val_nll: Option<f64>,
    /// Per-epoch mean of the negative ELBO per datapoint.
    pub loss_trace: Vec<f64>,
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + (v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Monte Carlo predictive NLL per datapoint of `networks` on `data`.
pub fn ensemble_nll(
    model: &LogDensityModel,
    networks: &[Network],
    precision: Option<f64>,
    data: &Subset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let mut per_net = Vec::with_capacity(networks.len());
    for net in networks {
        let out = net.forward_batch(data.x.view())?;
        per_net.push(pointwise_log_likelihood(model.likelihood(), &out, data.y.view(), precision)?);
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let col: Vec<f64> = per_net.iter().map(|p| p[i]).collect();
        total += log_mean_exp(&col);
    }
    Ok(-total / data.len() as f64)
}

struct State {
    theta: Vec<f64>,
    q: MeanFieldGaussian,
}

impl State {
    fn network(&self, base: &Network, stochastic: &[usize], theta_s: &[f64]) -> Result<Network> {
        let mut net = base.with_theta(self.theta.clone())?;
        let t = net.theta_mut();
        for (&i, &v) in stochastic.iter().zip(theta_s) {
            t[i] = v;
        }
        Ok(net)
    }
}

/// Fixed noise precision used by the variational objective.
fn fixed_precision(model: &LogDensityModel) -> Option<f64> {
    model.likelihood().noise_variance().map(|v| 1.0 / v)
}

/// Single-sample (or `mc_samples`) estimate of the ELBO including the
/// deterministic prior term, with `beta` weighting the KL.
fn elbo_and_grad(
    model: &LogDensityModel,
    state: &State,
    beta: f64,
    mc_samples: usize,
    rows: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let stochastic = model.stochastic_indices();
    let k = stochastic.len();
    let precision = fixed_precision(model);
    let sigma = state.q.sigma();
    let mut g_theta = vec![0.0; state.theta.len()];
    let mut g_mu = vec![0.0; k];
    let mut g_rho = vec![0.0; k];
    let mut value = 0.0;
    let s = mc_samples.max(1) as f64;
    for _ in 0..mc_samples.max(1) {
        let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let theta_s: Vec<f64> = (0..k).map(|j| state.q.mu[j] + sigma[j] * eps[j]).collect();
        let net = state.network(model.base(), stochastic, &theta_s)?;
        if model.temperature() > 0.0 {
            let eval = model.likelihood_eval(&net, precision, rows)?;
            value += eval.log_lik / s;
            for (g, e) in g_theta.iter_mut().zip(&eval.grad_theta) {
                *g += e / s;
            }
            for j in 0..k {
                let gl = eval.grad_theta[stochastic[j]] / s;
                g_mu[j] += gl;
                g_rho[j] += gl * eps[j] * sigmoid(state.q.rho[j]);
            }
        }
    }
    let (pm, pv) = (model.prior().mean, model.prior_variance());
    value -= beta * state.q.kl_to_prior(pm, pv);
    let (km, kr) = state.q.kl_grad(pm, pv);
    for j in 0..k {
        g_mu[j] -= beta * km[j];
        g_rho[j] -= beta * kr[j];
    }
    // Deterministic parameters carry the unrescaled prior as a point term.
    let (dm, dv) = (model.prior().mean, model.prior().variance);
    for (i, m) in model.partition().mask().iter().enumerate() {
        if !m {
            let t = state.theta[i];
            value -= 0.5 * (t - dm).powi(2) / dv;
            g_theta[i] -= (t - dm) / dv;
        } else {
            g_theta[i] = 0.0;
        }
    }
    Ok((value, g_theta, g_mu, g_rho))
}

/// Maximizes the ELBO over `(mu, rho)` and the deterministic parameters of
/// `model.base()`. With a validation set, returns the iterate with the
/// lowest Monte Carlo predictive NLL.
pub fn train_mfvi(model: &LogDensityModel, validation: Option<&Subset>, config: &MfviConfig) -> Result<MfviOutcome> {
    let k = model.num_stochastic();
    if k == 0 {
        return Err(Error::EmptyStochasticSet("MFVI needs at least one stochastic parameter"));
    }
    let stochastic = model.stochastic_indices().to_vec();
    let mut init_rng = stream_rng(config.seed, streams::INIT);
    let mu: Vec<f64> = match config.mu_init_std {
        Some(std) => (0..k).map(|_| std * init_rng.sample::<f64, _>(StandardNormal)).collect(),
        None => stochastic.iter().map(|&i| model.base().theta()[i]).collect(),
    };
    let rho: Vec<f64> = (0..k)
        .map(|_| (config.rho_init_mean + config.rho_init_std * init_rng.sample::<f64, _>(StandardNormal)).max(RHO_FLOOR))
        .collect();
    let mut state = State {
        theta: model.base().theta().to_vec(),
        q: MeanFieldGaussian::new(mu, rho)?,
    };
    let p = state.theta.len();
    let det_mask: Vec<bool> = model.partition().mask().iter().map(|m| !m).collect();
    let mut opt_theta = AdamW::new(p, config.lr, config.weight_decay);
    let mut opt_mu = AdamW::new(k, config.lr, 0.0);
    let mut opt_rho = AdamW::new(k, config.lr, 0.0);
    let mut rng = stream_rng(config.seed, streams::MFVI);
    let mut batch_rng = stream_rng(config.seed, streams::DATA);
    let n = model.num_data() as f64;
    let eval_every = config.eval_every.max(1);
    let precision = fixed_precision(model);

    let evaluate = |state: &State| -> Result<Option<f64>> {
        match validation {
            Some(v) if !v.is_empty() => {
                let mut er = stream_rng(config.seed, streams::PREDICT);
                let nets = (0..config.eval_samples.max(1))
                    .map(|_| {
                        let ts = state.q.sample(&mut er);
                        state.network(model.base(), &stochastic, &ts)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ensemble_nll(model, &nets, precision, v).map(Some)
            }
            _ => Ok(None),
        }
    };

    let mut best = (state.theta.clone(), state.q.clone());
    let mut best_epoch = 0;
    let mut best_val = evaluate(&state)?;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut iteration = 0;
    for epoch in 1..=config.epochs {
        let beta = if config.kl_anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / config.kl_anneal_epochs as f64).min(1.0)
        };
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(model.num_data(), config.batch_size, &mut batch_rng);
        let nb = batches.len() as f64;
        for rows in batches {
            iteration += 1;
            let (value, g_theta, g_mu, g_rho) =
                elbo_and_grad(model, &state, beta, config.mc_samples, rows.as_deref(), &mut rng).map_err(|e| match e {
                    Error::NonFiniteLoss { value, .. } => Error::Diverged { iteration, value },
                    other => other,
                })?;
            if !value.is_finite() {
                return Err(Error::Diverged { iteration, value });
            }
            epoch_loss += -value / n / nb;
            let neg = |g: &[f64]| g.iter().map(|v| -v / n).collect::<Vec<_>>();
            opt_theta.step(&mut state.theta, &neg(&g_theta), Some(&det_mask));
            opt_mu.step(&mut state.q.mu, &neg(&g_mu), None);
            opt_rho.step(&mut state.q.rho, &neg(&g_rho), None);
            for r in &mut state.q.rho {
                *r = r.max(RHO_FLOOR);
            }
        }
        loss_trace.push(epoch_loss);
        if validation.is_some() && (epoch % eval_every == 0 || epoch == config.epochs) {
            let val = evaluate(&state)?;
            if let (Some(v), Some(b)) = (val, best_val) {
                if v < b {
                    best_val = Some(v);
                    best = (state.theta.clone(), state.q.clone());
                    best_epoch = epoch;
                }
            }
        }
    }
    let (theta, q, best_epoch) = if best_val.is_some() {
        (best.0, best.1, best_epoch)
    } else {
        (state.theta, state.q, config.epochs)
    };
    let state = State { theta, q };
    let network = state.network(model.base(), &stochastic, &state.q.mu)?;
    Ok(MfviOutcome {
        posterior: state.q,
        network,
        best_epoch,
        best_val_nll: best_val,
        loss_trace,
    })
}

/// Monte Carlo ELBO of `q` under `model` with the deterministic parameters
/// at their values in `model.base()` (their prior term excluded).
pub fn estimate_elbo(model: &LogDensityModel, q: &MeanFieldGaussian, samples: usize, rng: &mut Rng) -> Result<f64> {
    let precision = fixed_precision(model);
    let mut ll = 0.0;
    for _ in 0..samples.max(1) {
        let ts = q.sample(rng);
        let mut qv = ts;
        if model.likelihood().learns_precision() {
            qv.push(precision.unwrap_or(1.0).ln());
        }
        let net = model.assemble(&qv)?;
        ll += model.likelihood_eval(&net, precision, None)?.log_lik;
    }
    Ok(ll / samples.max(1) as f64 - q.kl_to_prior(model.prior().mean, model.prior_variance()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form() {
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let v: f64 = 0.7;
        // softplus^{-1}(sqrt(v))
        let rho = (v.sqrt().exp() - 1.0).ln();
        let q = MeanFieldGaussian::new(vec![0.2, 0.2], vec![rho, rho]).unwrap();
        assert!(q.kl_to_prior(0.2, v).abs() < 1e-14);
        let (gm, gr) = q.kl_grad(0.2, v);
        assert!(gm.iter().chain(&gr).all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_gradient_matches_finite_difference() {
        let q = MeanFieldGaussian::new(vec![0.4], vec![-1.3]).unwrap();
        let (gm, gr) = q.kl_grad(0.1, 2.0);
        let h = 1e-6;
        let f = |m: f64, r: f64| MeanFieldGaussian::new(vec![m], vec![r]).unwrap().kl_to_prior(0.1, 2.0);
        assert!(((f(0.4 + h, -1.3) - f(0.4 - h, -1.3)) / (2.0 * h) - gm[0]).abs() < 1e-7);
        assert!(((f(0.4, -1.3 + h) - f(0.4, -1.3 - h)) / (2.0 * h) - gr[0]).abs() < 1e-7);
    }

    #[test]
    fn sigma_positive_for_floor() {
        assert!(softplus(RHO_FLOOR) > 0.0);
        assert!(softplus(-745.0) >= 0.0);
        assert_eq!(softplus(50.0), 50.0);
    }
}
