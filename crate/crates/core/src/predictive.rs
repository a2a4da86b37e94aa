//! Monte Carlo posterior predictive and evaluation metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::inference::laplace::LaplacePosterior;
use crate::inference::posterior::{Draw, PosteriorApproximation};
use crate::inference::softmax;
use crate::nn::Network;
use crate::partition::ParameterPartition;
use crate::rng::{stream_rng, streams};

pub const ECE_BINS: usize = 15;
/// Interval half-widths in standard deviations.
pub const SIGMA_LEVELS: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub task: Task,
    /// Regression: predictive mean `[n x out]`.
    pub mean: Array2<f64>,
    /// Regression: epistemic variance plus noise variance.
    pub variance: Option<Array2<f64>>,
    /// Regression: the epistemic part alone.
    pub epistemic_variance: Option<Array2<f64>>,
    /// Classification: averaged class probabilities `[n x classes]`.
    pub probabilities: Option<Array2<f64>>,
    pub samples_used: usize,
    /// `"mc"` or `"linearized"`.
    pub mode: String,
}

impl PredictiveResult {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    /// Predictive standard deviation of the first output.
    pub fn std(&self) -> Option<Vec<f64>> {
        self.variance.as_ref().map(|v| v.column(0).iter().map(|x| x.sqrt()).collect())
    }
}

/// Network outputs for each draw, `[draws][n x out]`.
pub fn draw_outputs(template: &Network, stochastic: &[usize], draws: &[Draw], x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
    let mut net = template.clone();
    draws
        .iter()
        .map(|(theta_s, _)| {
            if theta_s.len() != stochastic.len() {
                return Err(Error::dims("posterior draw", stochastic.len(), theta_s.len()));
            }
            let t = net.theta_mut();
            for (&i, &v) in stochastic.iter().zip(theta_s) {
                t[i] = v;
            }
            net.forward_batch(x)
        })
        .collect()
}

/// Aggregates per-draw outputs into a predictive. `noise_variance` applies
/// to draws that carry no noise precision of their own.
pub fn aggregate(outputs: &[Array2<f64>], draws: &[Draw], task: Task, noise_variance: f64) -> Result<PredictiveResult> {
    let s = outputs.len();
    if s == 0 {
        return Err(Error::EmptyData("predictive draws"));
    }
    let dim = outputs[0].dim();
    match task {
        Task::Regression => {
            let mut mean = Array2::zeros(dim);
            for o in outputs {
                mean += o;
            }
            mean /= s as f64;
            let mut epi = Array2::zeros(dim);
            if s > 1 {
                for o in outputs {
                    epi += &(o - &mean).mapv(|d| d * d);
                }
                epi /= (s - 1) as f64;
            }
            let noise = draws
                .iter()
                .map(|(_, tau)| tau.map_or(noise_variance, |t| 1.0 / t))
                .sum::<f64>()
                / draws.len().max(1) as f64;
            let variance = &epi + noise;
            Ok(PredictiveResult {
                task,
                mean,
                variance: Some(variance),
                epistemic_variance: Some(epi),
                probabilities: None,
                samples_used: s,
                mode: "mc".into(),
            })
        }
        Task::Classification { .. } => {
            let mut probs = Array2::zeros(dim);
            let mut mean = Array2::zeros(dim);
            for o in outputs {
                mean += o;
                for (i, row) in o.rows().into_iter().enumerate() {
                    let p = softmax(&row.to_vec());
                    for (j, v) in p.into_iter().enumerate() {
                        probs[[i, j]] += v;
                    }
                }
            }
            probs /= s as f64;
            mean /= s as f64;
            Ok(PredictiveResult {
                task,
                mean,
                variance: None,
                epistemic_variance: None,
                probabilities: Some(probs),
                samples_used: s,
                mode: "mc".into(),
            })
        }
    }
}

/// Monte Carlo predictive: pushes draws from `posterior` over the
/// stochastic subset through `template`, with the deterministic parameters
/// as stored in `template`.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    template: &Network,
    partition: &ParameterPartition,
    posterior: &PosteriorApproximation,
    x: ArrayView2<'_, f64>,
    n_samples: usize,
    task: Task,
    noise_variance: f64,
    seed: u64,
) -> Result<PredictiveResult> {
    if partition.len() != template.num_params() {
        return Err(Error::dims("partition", template.num_params(), partition.len()));
    }
    if posterior.dim() != partition.num_stochastic() {
        return Err(Error::dims("posterior", partition.num_stochastic(), posterior.dim()));
    }
    let mut rng = stream_rng(seed, streams::PREDICT);
    let draws = posterior.draws(n_samples, &mut rng)?;
    let outputs = draw_outputs(template, &partition.stochastic_indices(), &draws, x)?;
    aggregate(&outputs, &draws, task, noise_variance)
}

/// Deterministic prediction of a single network.
pub fn predict_point(net: &Network, x: ArrayView2<'_, f64>, task: Task, noise_variance: f64) -> Result<PredictiveResult> {
    let out = net.forward_batch(x)?;
    aggregate(&[out], &[(Vec::new(), None)], task, noise_variance)
}

/// Linearized Laplace predictive, with the probit approximation for
/// classification.
pub fn predict_linearized(
    template: &Network,
    partition: &ParameterPartition,
    laplace: &LaplacePosterior,
    x: ArrayView2<'_, f64>,
    task: Task,
    noise_variance: f64,
) -> Result<PredictiveResult> {
    let lin = laplace.linearized(template, &partition.stochastic_indices(), x)?;
    let mut r = match task {
        Task::Regression => {
            let epi = lin.variance();
            let variance = &epi + noise_variance;
            PredictiveResult {
                task,
                mean: lin.mean,
                variance: Some(variance),
                epistemic_variance: Some(epi),
                probabilities: None,
                samples_used: 0,
                mode: String::new(),
            }
        }
        Task::Classification { .. } => PredictiveResult {
            task,
            probabilities: Some(lin.probit_probabilities()),
            mean: lin.mean,
            variance: None,
            epistemic_variance: None,
            samples_used: 0,
            mode: String::new(),
        },
    };
    r.mode = "linearized".into();
    Ok(r)
}

fn check_rows(pred: &PredictiveResult, targets: &ArrayView2<'_, f64>) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyData("predictions"));
    }
    if targets.nrows() != pred.len() {
        return Err(Error::dims("targets", pred.len(), targets.nrows()));
    }
    Ok(())
}

fn labels(targets: &ArrayView2<'_, f64>) -> Vec<usize> {
    targets.column(0).iter().map(|v| *v as usize).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log predictive density per datapoint.
pub fn nll(pred: &PredictiveResult, targets: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(pred, &targets)?;
    match pred.task {
        Task::Regression => {
            let var = pred.variance.as_ref().ok_or(Error::WrongTask("regression predictive lacks variance"))?;
            if targets.dim() != pred.mean.dim() {
                return Err(Error::dims("targets", pred.mean.len(), targets.len()));
            }
            let mut total = 0.0;
            for ((m, v), y) in pred.mean.iter().zip(var.iter()).zip(targets.iter()) {
                total += 0.5 * (2.0 * PI * v).ln() + 0.5 * (y - m).powi(2) / v;
            }
            Ok(total / pred.len() as f64)
        }
        Task::Classification { .. } => {
            let p = pred.probabilities.as_ref().ok_or(Error::WrongTask("missing probabilities"))?;
            let total: f64 = labels(&targets)
                .iter()
                .enumerate()
                .map(|(i, &y)| -p[[i, y]].ln())
                .sum();
            Ok(total / pred.len() as f64)
        }
    }
}

pub fn rmse(pred: &PredictiveResult, targets: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(pred, &targets)?;
    if pred.task != Task::Regression {
        return Err(Error::WrongTask("rmse needs a regression predictive"));
    }
    if targets.dim() != pred.mean.dim() {
        return Err(Error::dims("targets", pred.mean.len(), targets.len()));
    }
    let ss: f64 = pred.mean.iter().zip(targets.iter()).map(|(m, y)| (m - y).powi(2)).sum();
    Ok((ss / pred.mean.len() as f64).sqrt())
}

pub fn accuracy(pred: &PredictiveResult, targets: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(pred, &targets)?;
    let p = pred.probabilities.as_ref().ok_or(Error::WrongTask("accuracy needs class probabilities"))?;
    let hits = labels(&targets)
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&p.row(*i).to_vec()) == y)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(pred: &PredictiveResult, targets: ArrayView2<'_, f64>) -> Result<f64> {
    ece_with_bins(pred, targets, ECE_BINS)
}

pub fn ece_with_bins(pred: &PredictiveResult, targets: ArrayView2<'_, f64>, bins: usize) -> Result<f64> {
    check_rows(pred, &targets)?;
    let p = pred.probabilities.as_ref().ok_or(Error::WrongTask("ECE needs class probabilities"))?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (i, &y) in labels(&targets).iter().enumerate() {
        let row = p.row(i).to_vec();
        let k = argmax(&row);
        let c = row[k];
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        hits[b] += f64::from(u8::from(k == y));
    }
    let n = pred.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            nb / n * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBand {
    pub sigmas: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Gaussian intervals `mean +- k sd` on the first output.
pub fn predictive_intervals(pred: &PredictiveResult, levels: &[f64]) -> Result<Vec<IntervalBand>> {
    let var = match (&pred.task, &pred.variance) {
        (Task::Regression, Some(v)) => v,
        _ => return Err(Error::WrongTask("predictive intervals need a regression predictive")),
    };
    Ok(levels
        .iter()
        .map(|&k| {
            let (lower, upper) = pred
                .mean
                .column(0)
                .iter()
                .zip(var.column(0))
                .map(|(m, v)| (m - k * v.sqrt(), m + k * v.sqrt()))
                .unzip();
            IntervalBand { sigmas: k, lower, upper }
        })
        .collect())
}

/// Fraction of targets inside each `k sigma` band.
pub fn interval_coverage(pred: &PredictiveResult, targets: ArrayView2<'_, f64>, levels: &[f64]) -> Result<Vec<f64>> {
    check_rows(pred, &targets)?;
    let bands = predictive_intervals(pred, levels)?;
    Ok(bands
        .iter()
        .map(|b| {
            let inside = targets
                .column(0)
                .iter()
                .enumerate()
                .filter(|(i, y)| **y >= b.lower[*i] && **y <= b.upper[*i])
                .count();
            inside as f64 / pred.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub rmse: Option<f64>,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    /// Keyed by `"1sigma"`, `"2sigma"`, `"3sigma"`.
    pub interval_coverage: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn compute(pred: &PredictiveResult, targets: ArrayView2<'_, f64>) -> Result<Self> {
        let nll = nll(pred, targets)?;
        match pred.task {
            Task::Regression => {
                let cov = interval_coverage(pred, targets, &SIGMA_LEVELS)?;
                Ok(Self {
                    nll,
                    rmse: Some(rmse(pred, targets)?),
                    accuracy: None,
                    ece: None,
                    interval_coverage: SIGMA_LEVELS
                        .iter()
                        .zip(cov)
                        .map(|(k, c)| (format!("{k}sigma"), c))
                        .collect(),
                })
            }
            Task::Classification { .. } => Ok(Self {
                nll,
                rmse: None,
                accuracy: Some(accuracy(pred, targets)?),
                ece: Some(ece(pred, targets)?),
                interval_coverage: BTreeMap::new(),
            }),
        }
    }

    pub fn csv_header() -> &'static str {
        "nll,rmse,accuracy,ece,coverage_1sigma,coverage_2sigma,coverage_3sigma"
    }

    /// One CSV row; absent metrics are empty cells.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let c = |k: &str| f(self.interval_coverage.get(k).copied());
        [
            f(Some(self.nll)),
            f(self.rmse),
            f(self.accuracy),
            f(self.ece),
            c("1sigma"),
            c("2sigma"),
            c("3sigma"),
        ]
        .join(",")
    }
}
