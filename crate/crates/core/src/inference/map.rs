use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{output_log_likelihood, LogDensityModel};
use super::optim::AdamW;
use crate::data::Subset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Full batch when `None`.
    pub batch_size: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: None,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapOutcome {
    pub network: Network,
    pub best_epoch: usize,
    pub best_val_nll: Option<f64>,
    pub final_loss: f64,
}

/// Mean negative log-likelihood of a point estimate on `data`.
pub fn point_nll(model: &LogDensityModel, net: &Network, precision: Option<f64>, data: &Subset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let out = net.forward_batch(data.x.view())?;
    let (ll, _, _) = output_log_likelihood(model.likelihood(), &out, data.y.view(), precision)?;
    Ok(-ll / data.len() as f64)
}

/// Minibatch row orderings for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: Option<usize>, rng: &mut crate::rng::Rng) -> Vec<Option<Vec<usize>>> {
    match batch {
        Some(b) if b < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(b.max(1)).map(|c| Some(c.to_vec())).collect()
        }
        _ => vec![None],
    }
}

/// Maximizes the tempered log posterior of `model` over its sampling
/// coordinates with AdamW. With a validation set, returns the iterate with
/// the lowest validation NLL seen at evaluation points.
pub fn train_map(model: &LogDensityModel, validation: Option<&Subset>, config: &MapConfig) -> Result<MapOutcome> {
    let mut q = model.initial_point();
    let k = model.num_stochastic();
    let decay: Vec<bool> = (0..q.len()).map(|i| i < k).collect();
    let mut opt = AdamW::new(q.len(), config.lr, config.weight_decay);
    let mut rng = stream_rng(config.seed, streams::OPTIM);
    let n = model.num_data() as f64;
    let eval_every = config.eval_every.max(1);

    let evaluate = |q: &[f64]| -> Result<Option<f64>> {
        match validation {
            Some(v) if !v.is_empty() => {
                let net = model.assemble(q)?;
                point_nll(model, &net, model.noise_precision(q), v).map(Some)
            }
            _ => Ok(None),
        }
    };

    let mut best_q = q.clone();
    let mut best_epoch = 0;
    let mut best_val = evaluate(&q)?;
    let mut last_loss = f64::NAN;
    let mut iteration = 0;
    for epoch in 1..=config.epochs {
        for rows in epoch_batches(model.num_data(), config.batch_size, &mut rng) {
            iteration += 1;
            let (lp, grad) = model
                .log_density_and_grad(&q, rows.as_deref())
                .map_err(|e| match e {
                    Error::NonFiniteLoss { value, .. } => Error::Diverged { iteration, value },
                    other => other,
                })?;
            last_loss = -lp / n;
            if !last_loss.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    value: last_loss,
                });
            }
            let loss_grad: Vec<f64> = grad.iter().map(|g| -g / n).collect();
            opt.step(&mut q, &loss_grad, Some(&decay));
        }
        if validation.is_some() && (epoch % eval_every == 0 || epoch == config.epochs) {
            let val = evaluate(&q)?;
            if let (Some(v), Some(b)) = (val, best_val) {
                if v < b {
                    best_val = Some(v);
                    best_q.clone_from(&q);
                    best_epoch = epoch;
                }
            }
        }
    }
    let chosen = if best_val.is_some() { best_q } else { q };
    let final_epoch = if best_val.is_some() { best_epoch } else { config.epochs };
    Ok(MapOutcome {
        network: model.assemble(&chosen)?,
        best_epoch: final_epoch,
        best_val_nll: best_val,
        final_loss: last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;
    use crate::inference::Likelihood;
    use crate::nn::{Activation, ArchitectureSpec};
    use crate::partition::{ParameterPartition, PriorSpec};
    use ndarray::Array2;

    fn line_data() -> Subset {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| -1.0 + i as f64 * 0.1);
        let y = x.mapv(|v| 2.0 * v);
        Subset {
            x,
            y,
            task: Task::Regression,
        }
    }

    fn linear_model(prior_var: f64, data: &Subset) -> LogDensityModel {
        let spec = ArchitectureSpec::mlp(&[1, 1], Activation::Relu).unwrap();
        LogDensityModel::new(
            Network::zeros(spec).unwrap(),
            ParameterPartition::all(2),
            PriorSpec::new(prior_var).unwrap(),
            Likelihood::gaussian(0.01),
            1.0,
            data,
        )
        .unwrap()
    }

    #[test]
    fn recovers_slope() {
        let data = line_data();
        let model = linear_model(1e6, &data);
        let cfg = MapConfig {
            epochs: 4000,
            lr: 0.01,
            weight_decay: 0.0,
            ..MapConfig::default()
        };
        let out = train_map(&model, None, &cfg).unwrap();
        // closed-form least squares: slope 2, intercept 0
        assert!((out.network.theta()[0] - 2.0).abs() < 1e-3);
        assert!(out.network.theta()[1].abs() < 1e-3);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = line_data();
        let model = linear_model(1.0, &data);
        let cfg = MapConfig {
            epochs: 0,
            ..MapConfig::default()
        };
        let out = train_map(&model, Some(&data), &cfg).unwrap();
        assert_eq!(out.network.theta(), model.base().theta());
    }
}
