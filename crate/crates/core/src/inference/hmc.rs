//! Fixed-trajectory Hamiltonian Monte Carlo with dual-averaging step size
//! adaptation during warmup. Identity mass matrix.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::LogDensityModel;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams, Rng};

/// A differentiable log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl LogDensity for LogDensityModel {
    fn dim(&self) -> usize {
        LogDensityModel::dim(self)
    }

    fn log_density_and_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        LogDensityModel::log_density_and_grad(self, q, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Found by a doubling/halving search when `None`.
    pub initial_step_size: Option<f64>,
    /// Standard deviation of Gaussian jitter added to each chain's start.
    pub init_jitter: f64,
    /// Each transition scales the step size by a uniform factor in
    /// `[1 - step_jitter, 1 + step_jitter]`, so fixed-length trajectories
    /// do not resonate with the target's scales.
    pub step_jitter: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            leapfrog_steps: 32,
            target_accept: 0.8,
            initial_step_size: None,
            init_jitter: 0.0,
            step_jitter: DEFAULT_STEP_JITTER,
            seed: 0,
        }
    }
}

/// Energy error beyond which a transition counts as divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;
/// Fraction of divergent post-warmup transitions that triggers a warning.
pub const DIVERGENCE_WARNING_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub id: usize,
    /// Post-warmup draws of the stochastic parameters.
    pub samples: Vec<Vec<f64>>,
    /// Noise precision per draw when it is sampled; empty otherwise.
    pub noise_precision: Vec<f64>,
    pub warmup_discarded: usize,
    pub step_size: f64,
    pub accept_rate: f64,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub chains: Vec<Chain>,
    pub warnings: Vec<String>,
}

impl SampleSet {
    pub fn dim(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| c.samples.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0)
    }

    pub fn num_samples(&self) -> usize {
        self.chains.iter().map(|c| c.samples.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.samples.iter())
    }

    /// All draws with the noise precision of each (if sampled).
    pub fn draws(&self) -> Vec<(&[f64], Option<f64>)> {
        self.chains
            .iter()
            .flat_map(|c| {
                c.samples
                    .iter()
                    .enumerate()
                    .map(move |(i, s)| (s.as_slice(), c.noise_precision.get(i).copied()))
            })
            .collect()
    }

    /// A sample set holding a single point mass.
    pub fn point(theta_s: Vec<f64>) -> Self {
        Self {
            chains: vec![Chain {
                id: 0,
                samples: vec![theta_s],
                noise_precision: Vec::new(),
                warmup_discarded: 0,
                step_size: 0.0,
                accept_rate: 1.0,
                divergences: 0,
            }],
            warnings: Vec::new(),
        }
    }

    /// CSV with per-chain, per-coordinate mean and standard deviation.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("chain,coordinate,mean,std\n");
        for c in &self.chains {
            let n = c.samples.len();
            if n == 0 {
                continue;
            }
            let dim = c.samples[0].len();
            for j in 0..dim {
                let mean = c.samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
                let var = if n > 1 {
                    c.samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                out.push_str(&format!("{},{},{:.16e},{:.16e}\n", c.id, j, mean, var.sqrt()));
            }
        }
        out
    }
}

/// `steps` leapfrog steps in place. Returns the final log density and
/// gradient.
pub fn leapfrog(
    target: &dyn LogDensity,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut Vec<f64>,
    step_size: f64,
    steps: usize,
) -> Result<f64> {
    let mut lp = f64::NAN;
    for _ in 0..steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * step_size * gi;
        }
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += step_size * pi;
        }
        let (l, g) = target.log_density_and_grad(q)?;
        lp = l;
        *grad = g;
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * step_size * gi;
        }
    }
    Ok(lp)
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

struct Transition {
    accept_prob: f64,
    accepted: bool,
    divergent: bool,
}

struct ChainState {
    q: Vec<f64>,
    lp: f64,
    grad: Vec<f64>,
}

fn transition(
    target: &dyn LogDensity,
    state: &mut ChainState,
    step_size: f64,
    steps: usize,
    rng: &mut Rng,
) -> Transition {
    let p0: Vec<f64> = (0..state.q.len()).map(|_| rng.sample(StandardNormal)).collect();
    let h0 = -state.lp + kinetic(&p0);
    let mut q = state.q.clone();
    let mut p = p0;
    let mut grad = state.grad.clone();
    let result = leapfrog(target, &mut q, &mut p, &mut grad, step_size, steps);
    let u: f64 = rng.random();
    let (delta_h, lp) = match result {
        Ok(lp) if lp.is_finite() => (-lp + kinetic(&p) - h0, lp),
        _ => (f64::INFINITY, f64::NAN),
    };
    if !delta_h.is_finite() || delta_h > MAX_ENERGY_ERROR {
        return Transition {
            accept_prob: 0.0,
            accepted: false,
            divergent: true,
        };
    }
    let accept_prob = (-delta_h).exp().min(1.0);
    let accepted = u < accept_prob;
    if accepted {
        state.q = q;
        state.lp = lp;
        state.grad = grad;
    }
    Transition {
        accept_prob,
        accepted,
        divergent: false,
    }
}

/// Doubles or halves the step size until the one-step acceptance
/// probability crosses 1/2.
fn find_reasonable_step_size(target: &dyn LogDensity, state: &ChainState, rng: &mut Rng) -> f64 {
    let mut eps: f64 = 0.1;
    let accept = |eps: f64, rng: &mut Rng| -> f64 {
        let p0: Vec<f64> = (0..state.q.len()).map(|_| rng.sample(StandardNormal)).collect();
        let h0 = -state.lp + kinetic(&p0);
        let mut q = state.q.clone();
        let mut p = p0;
        let mut g = state.grad.clone();
        match leapfrog(target, &mut q, &mut p, &mut g, eps, 1) {
            Ok(lp) if lp.is_finite() => {
                let dh = -lp + kinetic(&p) - h0;
                if dh.is_finite() {
                    (-dh).exp().min(1.0)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let a0 = accept(eps, rng);
    let up = a0 > 0.5;
    for _ in 0..60 {
        let a = accept(eps, rng);
        if up && a <= 0.5 {
            break;
        }
        if !up && a > 0.5 {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps
}

/// Dual averaging of the log step size toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: usize,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * initial_step).ln(),
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            h_bar: 0.0,
            log_eps_bar: 0.0,
            m: 0,
        }
    }

    /// Feeds one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.m += 1;
        let m = self.m as f64;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        let log_eps = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Raw draws of one chain over the full coordinate vector.
struct RawChain {
    draws: Vec<Vec<f64>>,
    step_size: f64,
    accepted: usize,
    divergences: usize,
}

pub const DEFAULT_STEP_JITTER: f64 = 0.3;

fn jittered(eps: f64, jitter: f64, rng: &mut Rng) -> f64 {
    eps * (1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0))
}

fn chain_rng(seed: u64, chain: usize) -> Rng {
    stream_rng(seed, streams::HMC | ((chain as u64 + 1) << 32))
}

fn run_chain(target: &dyn LogDensity, init: &[f64], config: &HmcConfig, chain: usize) -> Result<RawChain> {
    let mut rng = chain_rng(config.seed, chain);
    let mut q = init.to_vec();
    if config.init_jitter > 0.0 {
        for v in &mut q {
            let e: f64 = rng.sample(StandardNormal);
            *v += config.init_jitter * e;
        }
    }
    let (lp, grad) = target.log_density_and_grad(&q)?;
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { value: lp, theta: q });
    }
    let mut state = ChainState { q, lp, grad };
    let mut eps = match config.initial_step_size {
        Some(e) => e,
        None => find_reasonable_step_size(target, &state, &mut rng),
    };
    let mut adapt = DualAveraging::new(eps, config.target_accept);
    for _ in 0..config.warmup {
        let step = jittered(eps, config.step_jitter, &mut rng);
        let t = transition(target, &mut state, step, config.leapfrog_steps, &mut rng);
        eps = adapt.update(t.accept_prob);
    }
    if config.warmup > 0 {
        eps = adapt.final_step_size();
    }
    let mut draws = Vec::with_capacity(config.samples);
    let mut accepted = 0;
    let mut divergences = 0;
    for _ in 0..config.samples {
        let step = jittered(eps, config.step_jitter, &mut rng);
        let t = transition(target, &mut state, step, config.leapfrog_steps, &mut rng);
        accepted += usize::from(t.accepted);
        divergences += usize::from(t.divergent);
        draws.push(state.q.clone());
    }
    Ok(RawChain {
        draws,
        step_size: eps,
        accepted,
        divergences,
    })
}

/// Runs independent chains (in parallel on the current rayon pool) on an
/// arbitrary target. Each chain draws from its own stream of `config.seed`.
pub fn sample(target: &dyn LogDensity, init: &[f64], config: &HmcConfig) -> Result<SampleSet> {
    sample_split(target, init, config, 0)
}

/// Like [`sample`], but the trailing `aux` coordinates (e.g. log noise
/// precision) are moved out of the parameter draws; the last one is stored
/// exponentiated as the noise precision.
fn sample_split(target: &dyn LogDensity, init: &[f64], config: &HmcConfig, aux: usize) -> Result<SampleSet> {
    if target.dim() == 0 {
        return Err(Error::EmptyStochasticSet("nothing to sample"));
    }
    if init.len() != target.dim() {
        return Err(Error::dims("HMC initial point", target.dim(), init.len()));
    }
    if config.chains == 0 || config.leapfrog_steps == 0 {
        return Err(Error::InvalidConfig("chains and leapfrog_steps must be positive".into()));
    }
    if !(config.target_accept > 0.0 && config.target_accept < 1.0) {
        return Err(Error::InvalidConfig("target_accept must lie in (0, 1)".into()));
    }
    if !(0.0..1.0).contains(&config.step_jitter) {
        return Err(Error::InvalidConfig("step_jitter must lie in [0, 1)".into()));
    }
    let raw: Vec<Result<RawChain>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, config, c))
        .collect();
    let mut chains = Vec::with_capacity(config.chains);
    let mut warnings = Vec::new();
    for (id, r) in raw.into_iter().enumerate() {
        let r = r?;
        let keep = target.dim() - aux;
        let noise_precision = if aux > 0 {
            r.draws.iter().map(|d| d[target.dim() - 1].exp()).collect()
        } else {
            Vec::new()
        };
        let samples = r.draws.into_iter().map(|mut d| {
            d.truncate(keep);
            d
        });
        let n = config.samples.max(1) as f64;
        if r.divergences as f64 / n > DIVERGENCE_WARNING_FRACTION {
            warnings.push(format!(
                "chain {id}: {} of {} transitions divergent",
                r.divergences, config.samples
            ));
        }
        chains.push(Chain {
            id,
            samples: samples.collect(),
            noise_precision,
            warmup_discarded: config.warmup,
            step_size: r.step_size,
            accept_rate: r.accepted as f64 / n,
            divergences: r.divergences,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SampleSet { chains, warnings })
}

/// HMC over the stochastic subset of `model`. `init` is a point in the
/// model's sampling coordinates (see [`LogDensityModel::initial_point`]).
pub fn run_hmc(model: &LogDensityModel, init: &[f64], config: &HmcConfig) -> Result<SampleSet> {
    if model.num_stochastic() == 0 {
        return Err(Error::EmptyStochasticSet("HMC needs at least one stochastic parameter"));
    }
    let aux = usize::from(model.likelihood().learns_precision());
    sample_split(model, init, config, aux)
}

/// Effective sample size of one scalar quantity across chains, using
/// Geyer's initial positive sequence on the chain-averaged autocorrelation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return (m * n) as f64;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let c0 = autocov(0);
    if c0 <= 0.0 {
        return (m * n) as f64;
    }
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (1.0 + 2.0 * sum).max(1.0 / (m * n) as f64);
    (m * n) as f64 / tau
}

/// Monte Carlo standard error of the mean of one coordinate.
pub fn mcse_mean(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / effective_sample_size(chains)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * q.iter().map(|v| v * v).sum::<f64>(), q.iter().map(|v| -v).collect()))
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdNormal(3);
        let q0 = vec![0.3, -1.2, 2.0];
        let p0 = vec![1.0, 0.5, -0.7];
        let mut q = q0.clone();
        let mut p = p0.clone();
        let mut g = target.log_density_and_grad(&q).unwrap().1;
        leapfrog(&target, &mut q, &mut p, &mut g, 0.13, 25).unwrap();
        p.iter_mut().for_each(|v| *v = -*v);
        leapfrog(&target, &mut q, &mut p, &mut g, 0.13, 25).unwrap();
        for i in 0..3 {
            assert!((q[i] - q0[i]).abs() < 1e-8);
            assert!((p[i] + p0[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = HmcConfig {
            chains: 4,
            warmup: 500,
            samples: 1000,
            leapfrog_steps: 8,
            seed: 11,
            ..HmcConfig::default()
        };
        let set = sample(&StdNormal(2), &[0.5, -0.5], &cfg).unwrap();
        for j in 0..2 {
            let per_chain: Vec<Vec<f64>> = set
                .chains
                .iter()
                .map(|c| c.samples.iter().map(|s| s[j]).collect())
                .collect();
            let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
            assert!(mean.abs() < 3.0 * mcse_mean(&per_chain), "mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "var {var}");
        }
        for c in &set.chains {
            assert!(c.accept_rate >= 0.65 && c.accept_rate <= 0.99, "accept {}", c.accept_rate);
            assert_eq!(c.warmup_discarded, 500);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = HmcConfig {
            chains: 2,
            warmup: 20,
            samples: 20,
            leapfrog_steps: 4,
            seed: 3,
            ..HmcConfig::default()
        };
        let a = sample(&StdNormal(2), &[0.0, 0.0], &cfg).unwrap();
        let b = sample(&StdNormal(2), &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chains_do_not_share_streams_across_seeds() {
        let cfg = |seed| HmcConfig {
            chains: 2,
            warmup: 10,
            samples: 10,
            leapfrog_steps: 4,
            seed,
            ..HmcConfig::default()
        };
        let a = sample(&StdNormal(2), &[0.0, 0.0], &cfg(3)).unwrap();
        let b = sample(&StdNormal(2), &[0.0, 0.0], &cfg(4)).unwrap();
        assert_ne!(a.chains[1].samples, b.chains[0].samples);
    }

    #[test]
    fn step_jitter_range_is_checked() {
        for j in [-0.1, 1.0] {
            let cfg = HmcConfig {
                step_jitter: j,
                ..HmcConfig::default()
            };
            assert!(sample(&StdNormal(1), &[0.0], &cfg).is_err());
        }
    }

    #[test]
    fn empty_target_is_error() {
        assert!(sample(&StdNormal(0), &[], &HmcConfig::default()).is_err());
    }

    struct Broken;
    impl LogDensity for Broken {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_and_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
            if q[0].abs() > 0.5 {
                Ok((f64::NAN, vec![f64::NAN]))
            } else {
                Ok((0.0, vec![0.0]))
            }
        }
    }

    #[test]
    fn divergences_are_rejected_and_reported() {
        let cfg = HmcConfig {
            chains: 1,
            warmup: 0,
            samples: 50,
            leapfrog_steps: 10,
            initial_step_size: Some(1.0),
            ..HmcConfig::default()
        };
        let set = sample(&Broken, &[0.0], &cfg).unwrap();
        assert!(set.chains[0].divergences > 0);
        assert!(set.chains[0].samples.iter().all(|s| s[0].abs() <= 0.5));
        assert!(!set.warnings.is_empty());
    }

    #[test]
    fn ess_of_iid_is_close_to_n() {
        let mut rng = stream_rng(0, 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let ess = effective_sample_size(&chains);
        assert!(ess > 6000.0 && ess < 10000.0, "ess {ess}");
    }
}
