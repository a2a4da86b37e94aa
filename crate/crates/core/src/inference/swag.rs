//! SWAG: a diagonal plus low-rank Gaussian fitted to constant learning rate
//! SGD iterates over the stochastic subset.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::map::epoch_batches;
use super::model::LogDensityModel;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{stream_rng, streams, Rng};

pub const VARIANCE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwagConfig {
    pub epochs: usize,
    pub snapshots_per_epoch: usize,
    /// Maximum number of deviation columns kept.
    pub rank: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            snapshots_per_epoch: 4,
            rank: 20,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwagPosterior {
    pub swa_mean: Vec<f64>,
    pub diag_second_moment: Vec<f64>,
    /// Most recent deviations from the running mean, oldest first.
    pub deviations: Vec<Vec<f64>>,
    pub max_rank: usize,
    pub num_snapshots: usize,
    /// Fewer deviation columns than `max_rank` were available.
    pub rank_deficient: bool,
}

impl SwagPosterior {
    pub fn empty(dim: usize, max_rank: usize) -> Self {
        Self {
            swa_mean: vec![0.0; dim],
            diag_second_moment: vec![0.0; dim],
            deviations: Vec::new(),
            max_rank,
            num_snapshots: 0,
            rank_deficient: true,
        }
    }

    pub fn from_snapshots(snapshots: &[Vec<f64>], max_rank: usize) -> Result<Self> {
        let dim = snapshots.first().map(Vec::len).ok_or(Error::EmptyData("SWAG snapshots"))?;
        let mut s = Self::empty(dim, max_rank);
        for snap in snapshots {
            s.collect(snap)?;
        }
        Ok(s)
    }

    /// Folds one iterate into the running moments.
    pub fn collect(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::dims("SWAG snapshot", self.dim(), theta.len()));
        }
        let n = self.num_snapshots as f64;
        for ((m, s), t) in self.swa_mean.iter_mut().zip(&mut self.diag_second_moment).zip(theta) {
            *m = (n * *m + t) / (n + 1.0);
            *s = (n * *s + t * t) / (n + 1.0);
        }
        self.num_snapshots += 1;
        if self.max_rank > 0 {
            let dev = theta.iter().zip(&self.swa_mean).map(|(t, m)| t - m).collect();
            if self.deviations.len() == self.max_rank {
                self.deviations.remove(0);
            }
            self.deviations.push(dev);
        }
        self.rank_deficient = self.deviations.len() < self.max_rank;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.swa_mean.len()
    }

    pub fn rank(&self) -> usize {
        self.deviations.len()
    }

    pub fn diag_variance(&self) -> Vec<f64> {
        self.swa_mean
            .iter()
            .zip(&self.diag_second_moment)
            .map(|(m, s)| (s - m * m).max(VARIANCE_FLOOR))
            .collect()
    }

    fn low_rank_scale(&self) -> Option<f64> {
        let k = self.rank();
        (k >= 2).then(|| 1.0 / (2.0 * (k - 1) as f64).sqrt())
    }

    /// Draws `mean + diag^{1/2} z1 / sqrt(2) + D z2 / sqrt(2 (K - 1))`. The
    /// low-rank term is dropped when fewer than two columns exist.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let var = self.diag_variance();
        let mut out: Vec<f64> = self
            .swa_mean
            .iter()
            .zip(&var)
            .map(|(m, v)| m + (v / 2.0).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(c) = self.low_rank_scale() {
            for col in &self.deviations {
                let z: f64 = rng.sample(StandardNormal);
                for (o, d) in out.iter_mut().zip(col) {
                    *o += c * d * z;
                }
            }
        }
        out
    }

    /// Diagonal of the covariance implied by [`SwagPosterior::sample`].
    pub fn implied_variance(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.diag_variance().iter().map(|d| d / 2.0).collect();
        if let Some(c) = self.low_rank_scale() {
            for col in &self.deviations {
                for (vi, d) in v.iter_mut().zip(col) {
                    *vi += c * c * d * d;
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SwagOutcome {
    pub posterior: SwagPosterior,
    /// The start network with `theta_S` replaced by the SWA mean.
    pub network: Network,
}

/// Runs constant learning rate SGD over the stochastic subset of `model`,
/// starting from `start`, and fits SWAG moments to the iterates.
pub fn fit_swag(model: &LogDensityModel, start: &Network, config: &SwagConfig) -> Result<SwagOutcome> {
    let k = model.num_stochastic();
    if k == 0 {
        return Err(Error::EmptyStochasticSet("SWAG needs at least one stochastic parameter"));
    }
    if config.snapshots_per_epoch == 0 || config.epochs == 0 {
        return Err(Error::InvalidConfig("SWAG needs epochs and snapshots_per_epoch > 0".into()));
    }
    let model = model.with_base(start.clone())?;
    let mut q = model.initial_point();
    let n = model.num_data() as f64;
    let mut rng = stream_rng(config.seed, streams::SWAG);
    let mut post = SwagPosterior::empty(k, config.rank);
    let mut iteration = 0;
    for _ in 0..config.epochs {
        let mut batches = epoch_batches(model.num_data(), config.batch_size, &mut rng);
        while batches.len() < config.snapshots_per_epoch {
            let more = epoch_batches(model.num_data(), config.batch_size, &mut rng);
            batches.extend(more);
        }
        let steps = batches.len();
        let mut taken = 0;
        for (s, rows) in batches.into_iter().enumerate() {
            iteration += 1;
            let (lp, grad) = model
                .log_density_and_grad(&q, rows.as_deref())
                .map_err(|e| match e {
                    Error::NonFiniteLoss { value, .. } => Error::Diverged { iteration, value },
                    other => other,
                })?;
            if !lp.is_finite() {
                return Err(Error::Diverged { iteration, value: lp });
            }
            for j in 0..k {
                q[j] += config.lr * (grad[j] / n - config.weight_decay * q[j]);
            }
            let due = (s + 1) * config.snapshots_per_epoch / steps;
            if due > taken {
                taken = due;
                post.collect(&q[..k])?;
            }
        }
    }
    if post.rank_deficient {
        log::warn!(
            "SWAG collected {} deviation columns, fewer than the requested {}",
            post.rank(),
            config.rank
        );
    }
    let mut mq = post.swa_mean.clone();
    mq.extend_from_slice(&q[k..]);
    let network = model.assemble(&mq)?;
    Ok(SwagOutcome { posterior: post, network })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_snapshots_have_floored_variance() {
        let s = SwagPosterior::from_snapshots(&vec![vec![1.5, -2.0]; 5], 3).unwrap();
        assert_eq!(s.diag_variance(), vec![VARIANCE_FLOOR; 2]);
        let draw = s.sample(&mut stream_rng(0, 0));
        assert!((draw[0] - 1.5).abs() < 1e-12 && (draw[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_snapshot_arithmetic() {
        let s = SwagPosterior::from_snapshots(&[vec![-1.0], vec![1.0]], 2).unwrap();
        assert_eq!(s.swa_mean, vec![0.0]);
        assert_eq!(s.diag_second_moment, vec![1.0]);
        assert_eq!(s.diag_variance(), vec![1.0]);
        assert_eq!(s.rank(), 2);
        assert!(!s.rank_deficient);
    }

    #[test]
    fn rank_is_capped_and_flagged() {
        let snaps: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let s = SwagPosterior::from_snapshots(&snaps, 4).unwrap();
        assert_eq!(s.rank(), 4);
        let s = SwagPosterior::from_snapshots(&snaps, 10).unwrap();
        assert!(s.rank_deficient);
    }
}
