use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{Subset, Task};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::partition::{effective_prior, ParameterPartition, PriorSpec};

/// Observation noise for Gaussian likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    Fixed {
        variance: f64,
    },
    /// Precision `tau` with a `Gamma(shape, rate)` prior, sampled as
    /// `log tau`. Backends that do not sample it use `initial_variance`.
    LearnedPrecision {
        shape: f64,
        rate: f64,
        initial_variance: f64,
    },
}

impl NoiseModel {
    pub fn fixed_variance(&self) -> f64 {
        match *self {
            NoiseModel::Fixed { variance } => variance,
            NoiseModel::LearnedPrecision {
                initial_variance, ..
            } => initial_variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Likelihood {
    Gaussian { noise: NoiseModel },
    Categorical,
}

impl Likelihood {
    pub fn gaussian(variance: f64) -> Self {
        Likelihood::Gaussian {
            noise: NoiseModel::Fixed { variance },
        }
    }

    pub fn learns_precision(&self) -> bool {
        matches!(
            self,
            Likelihood::Gaussian {
                noise: NoiseModel::LearnedPrecision { .. }
            }
        )
    }

    /// Noise variance used by backends that keep it fixed.
    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            Likelihood::Gaussian { noise } => Some(noise.fixed_variance()),
            Likelihood::Categorical => None,
        }
    }

    fn validate(&self, task: Task) -> Result<()> {
        match (self, task) {
            (Likelihood::Gaussian { noise }, Task::Regression) => {
                let ok = match *noise {
                    NoiseModel::Fixed { variance } => variance > 0.0,
                    NoiseModel::LearnedPrecision {
                        shape,
                        rate,
                        initial_variance,
                    } => shape > 0.0 && rate > 0.0 && initial_variance > 0.0,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig("noise parameters must be positive".into()))
                }
            }
            (Likelihood::Categorical, Task::Classification { .. }) => Ok(()),
            _ => Err(Error::WrongTask("likelihood does not match the dataset task")),
        }
    }
}

/// Log-likelihood of a batch with its derivatives, already multiplied by
/// the temperature and the minibatch rescaling factor.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub log_lik: f64,
    /// Derivative with respect to the full parameter vector.
    pub grad_theta: Vec<f64>,
    /// Derivative with respect to `log tau` (zero for fixed noise).
    pub grad_log_precision: f64,
}

/// Tempered log posterior over the stochastic subset, with the
/// deterministic parameters held at the values in `base`.
///
/// The sampling coordinates are `[theta_S, log tau?]`: the log noise
/// precision is appended when the likelihood learns it.
#[derive(Debug, Clone)]
pub struct LogDensityModel {
    base: Network,
    partition: ParameterPartition,
    stochastic: Vec<usize>,
    prior: PriorSpec,
    prior_variance: f64,
    likelihood: Likelihood,
    temperature: f64,
    x: Array2<f64>,
    y: Array2<f64>,
    task: Task,
}

impl LogDensityModel {
    pub fn new(
        base: Network,
        partition: ParameterPartition,
        prior: PriorSpec,
        likelihood: Likelihood,
        temperature: f64,
        data: &Subset,
    ) -> Result<Self> {
        if partition.len() != base.num_params() {
            return Err(Error::dims("partition", base.num_params(), partition.len()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {temperature} must be >= 0")));
        }
        if data.x.ncols() != base.spec().input_dim {
            return Err(Error::dims("data features", base.spec().input_dim, data.x.ncols()));
        }
        likelihood.validate(data.task)?;
        let expected_out = match data.task {
            Task::Regression => data.y.ncols(),
            Task::Classification { n_classes } => n_classes,
        };
        if base.spec().output_dim != expected_out {
            return Err(Error::dims("network outputs", expected_out, base.spec().output_dim));
        }
        let prior_variance = if partition.num_stochastic() == 0 {
            prior.variance
        } else {
            effective_prior(&prior, &partition, base.num_params())?
        };
        Ok(Self {
            stochastic: partition.stochastic_indices(),
            base,
            partition,
            prior,
            prior_variance,
            likelihood,
            temperature,
            x: data.x.clone(),
            y: data.y.clone(),
            task: data.task,
        })
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn partition(&self) -> &ParameterPartition {
        &self.partition
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    /// Prior variance applied to the stochastic subset after rescaling.
    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn likelihood(&self) -> &Likelihood {
        &self.likelihood
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn num_data(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_stochastic(&self) -> usize {
        self.stochastic.len()
    }

    pub fn stochastic_indices(&self) -> &[usize] {
        &self.stochastic
    }

    /// Dimension of the sampling coordinates.
    pub fn dim(&self) -> usize {
        self.stochastic.len() + usize::from(self.likelihood.learns_precision())
    }

    /// A copy with a different base network (same architecture).
    pub fn with_base(&self, base: Network) -> Result<Self> {
        if base.spec() != self.base.spec() {
            return Err(Error::InvalidConfig("base network architecture differs".into()));
        }
        let mut m = self.clone();
        m.base = base;
        Ok(m)
    }

    /// `[theta_S of base, log tau?]`.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.stochastic.iter().map(|&i| self.base.theta()[i]).collect();
        if let Likelihood::Gaussian {
            noise: NoiseModel::LearnedPrecision {
                initial_variance, ..
            },
        } = self.likelihood
        {
            q.push(-initial_variance.ln());
        }
        q
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::dims("sampling coordinates", self.dim(), q.len()));
        }
        Ok(())
    }

    /// Full network with `theta_S` taken from `q`.
    pub fn assemble(&self, q: &[f64]) -> Result<Network> {
        self.check_q(q)?;
        let mut net = self.base.clone();
        let theta = net.theta_mut();
        for (&i, &v) in self.stochastic.iter().zip(q) {
            theta[i] = v;
        }
        Ok(net)
    }

    /// Noise precision encoded in `q`, or the fixed one.
    pub fn noise_precision(&self, q: &[f64]) -> Option<f64> {
        match self.likelihood {
            Likelihood::Gaussian {
                noise: NoiseModel::Fixed { variance },
            } => Some(1.0 / variance),
            Likelihood::Gaussian {
                noise: NoiseModel::LearnedPrecision { .. },
            } => q.last().map(|s| s.exp()),
            Likelihood::Categorical => None,
        }
    }

    pub fn log_prior(&self, theta_s: &[f64]) -> f64 {
        let v = self.prior_variance;
        let m = self.prior.mean;
        let norm = -0.5 * (2.0 * PI * v).ln();
        theta_s
            .iter()
            .map(|t| norm - 0.5 * (t - m).powi(2) / v)
            .sum()
    }

    /// Tempered log-likelihood of `net` on the rows `rows` (all rows when
    /// `None`), rescaled by `N / |rows|`.
    pub fn likelihood_eval(
        &self,
        net: &Network,
        precision: Option<f64>,
        rows: Option<&[usize]>,
    ) -> Result<LikelihoodEval> {
        let (xb, yb);
        let (x, y): (ArrayView2<f64>, ArrayView2<f64>) = match rows {
            Some(r) => {
                xb = self.x.select(Axis(0), r);
                yb = self.y.select(Axis(0), r);
                (xb.view(), yb.view())
            }
            None => (self.x.view(), self.y.view()),
        };
        let n_batch = x.nrows();
        if n_batch == 0 {
            return Err(Error::EmptyData("likelihood batch"));
        }
        let scale = self.temperature * self.num_data() as f64 / n_batch as f64;
        let trace = net.forward_trace(x)?;
        let out = trace.output();
        let (ll, mut d_out, d_log_tau) = output_log_likelihood(&self.likelihood, out, y, precision)?;
        let log_lik = scale * ll;
        if !log_lik.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: log_lik,
                theta: net.theta().to_vec(),
            });
        }
        d_out *= scale;
        let mut grad_theta = vec![0.0; net.num_params()];
        net.backward(&trace, d_out.view(), &mut grad_theta)?;
        Ok(LikelihoodEval {
            log_lik,
            grad_theta,
            grad_log_precision: scale * d_log_tau,
        })
    }

    fn log_precision_prior(&self, q: &[f64]) -> (f64, f64) {
        match self.likelihood {
            Likelihood::Gaussian {
                noise: NoiseModel::LearnedPrecision { shape, rate, .. },
            } => {
                let s = *q.last().expect("learned precision coordinate");
                let tau = s.exp();
                // Gamma density on tau plus the log-Jacobian `s` of tau = exp(s).
                let lp = shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * s - rate * tau + s;
                (lp, shape - rate * tau)
            }
            _ => (0.0, 0.0),
        }
    }

    pub fn log_density(&self, q: &[f64]) -> Result<f64> {
        self.log_density_and_grad(q, None).map(|(v, _)| v)
    }

    /// Log density at `q` and its gradient over the sampling coordinates,
    /// optionally restricted to a minibatch of rows.
    pub fn log_density_and_grad(&self, q: &[f64], rows: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        self.check_q(q)?;
        let k = self.stochastic.len();
        let net = self.assemble(q)?;
        let tau = self.noise_precision(q);
        let mut grad = vec![0.0; self.dim()];
        let mut value = 0.0;
        if self.temperature > 0.0 {
            let eval = self.likelihood_eval(&net, tau, rows)?;
            value += eval.log_lik;
            for (g, &i) in grad.iter_mut().zip(&self.stochastic) {
                *g = eval.grad_theta[i];
            }
            if self.likelihood.learns_precision() {
                grad[k] = eval.grad_log_precision;
            }
        }
        let theta_s = &q[..k];
        value += self.log_prior(theta_s);
        for (g, t) in grad.iter_mut().zip(theta_s) {
            *g -= (t - self.prior.mean) / self.prior_variance;
        }
        let (lp, dlp) = self.log_precision_prior(q);
        value += lp;
        if self.likelihood.learns_precision() {
            grad[k] += dlp;
        }
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                value,
                theta: net.theta().to_vec(),
            });
        }
        Ok((value, grad))
    }
}

/// Log-likelihood summed over rows, its derivative with respect to the
/// outputs and with respect to `log tau`.
pub fn output_log_likelihood(
    likelihood: &Likelihood,
    out: &Array2<f64>,
    y: ArrayView2<'_, f64>,
    precision: Option<f64>,
) -> Result<(f64, Array2<f64>, f64)> {
    match likelihood {
        Likelihood::Gaussian { .. } => {
            let tau = precision.ok_or_else(|| Error::InvalidConfig("missing noise precision".into()))?;
            if out.dim() != y.dim() {
                return Err(Error::dims("regression targets", out.len(), y.len()));
            }
            let resid = &y - out;
            let ss: f64 = resid.iter().map(|r| r * r).sum();
            let m = resid.len() as f64;
            let ll = 0.5 * m * (tau.ln() - (2.0 * PI).ln()) - 0.5 * tau * ss;
            let d_log_tau = 0.5 * m - 0.5 * tau * ss;
            Ok((ll, resid * tau, d_log_tau))
        }
        Likelihood::Categorical => {
            let mut d = Array2::zeros(out.dim());
            let mut ll = 0.0;
            for (i, row) in out.rows().into_iter().enumerate() {
                let label = y[[i, 0]] as usize;
                if label >= row.len() {
                    return Err(Error::dims("class label", row.len(), label));
                }
                let logits = row.to_vec();
                let probs = softmax(&logits);
                ll += log_softmax_at(&logits, label);
                for (j, p) in probs.iter().enumerate() {
                    d[[i, j]] = f64::from(u8::from(j == label)) - p;
                }
            }
            Ok((ll, d, 0.0))
        }
    }
}

/// Per-row log-likelihood of network outputs.
pub fn pointwise_log_likelihood(
    likelihood: &Likelihood,
    out: &Array2<f64>,
    y: ArrayView2<'_, f64>,
    precision: Option<f64>,
) -> Result<Vec<f64>> {
    match likelihood {
        Likelihood::Gaussian { .. } => {
            let tau = precision.ok_or_else(|| Error::InvalidConfig("missing noise precision".into()))?;
            if out.dim() != y.dim() {
                return Err(Error::dims("regression targets", out.len(), y.len()));
            }
            let c = 0.5 * (tau.ln() - (2.0 * PI).ln());
            Ok(out
                .rows()
                .into_iter()
                .zip(y.rows())
                .map(|(o, t)| o.iter().zip(t).map(|(a, b)| c - 0.5 * tau * (a - b).powi(2)).sum())
                .collect())
        }
        Likelihood::Categorical => out
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let label = y[[i, 0]] as usize;
                if label >= row.len() {
                    return Err(Error::dims("class label", row.len(), label));
                }
                Ok(log_softmax_at(&row.to_vec(), label))
            })
            .collect(),
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: &[f64], i: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[i] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ArchitectureSpec};
    use crate::partition::{select_by_layer, LayerDesignator};
    use ndarray::array;

    fn subset(x: Array2<f64>, y: Array2<f64>) -> Subset {
        Subset {
            x,
            y,
            task: Task::Regression,
        }
    }

    fn linear_net(theta: Vec<f64>) -> Network {
        let spec = ArchitectureSpec::mlp(&[2, 1], Activation::Relu).unwrap();
        Network::new(spec, theta).unwrap()
    }

    #[test]
    fn zero_temperature_is_prior_only() {
        let data = subset(array![[1.0, 2.0]], array![[5.0]]);
        let net = linear_net(vec![0.3, -0.1, 0.2]);
        let prior = PriorSpec::new(2.0).unwrap();
        let m = LogDensityModel::new(
            net.clone(),
            ParameterPartition::all(3),
            prior,
            Likelihood::gaussian(0.5),
            0.0,
            &data,
        )
        .unwrap();
        let q = m.initial_point();
        assert!((m.log_density(&q).unwrap() - m.log_prior(&q)).abs() < 1e-15);
    }

    #[test]
    fn single_point_hand_computation() {
        let data = subset(array![[1.0, 2.0]], array![[5.0]]);
        let theta = vec![0.3, -0.1, 0.2];
        let (s2, v) = (0.5, 2.0);
        let m = LogDensityModel::new(
            linear_net(theta.clone()),
            ParameterPartition::all(3),
            PriorSpec::new(v).unwrap(),
            Likelihood::gaussian(s2),
            1.0,
            &data,
        )
        .unwrap();
        let f = 0.3 * 1.0 - 0.1 * 2.0 + 0.2;
        let tt: f64 = theta.iter().map(|t| t * t).sum();
        let expected = -0.5 * (5.0 - f) * (5.0f64 - f) / s2 - 0.5 * tt / v
            - 0.5 * (2.0 * PI * s2).ln()
            - 1.5 * (2.0 * PI * v).ln();
        assert!((m.log_density(&theta).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn subset_gradient_and_precision_match_finite_differences() {
        let spec = ArchitectureSpec::mlp(&[1, 4, 1], Activation::Tanh).unwrap();
        let net = Network::init(spec.clone(), &mut crate::rng::stream_rng(1, 0)).unwrap();
        let data = subset(array![[0.1], [-0.7], [1.3], [0.4]], array![[0.5], [-0.2], [0.9], [0.0]]);
        let part = select_by_layer(&spec, &[LayerDesignator::Output]).unwrap();
        let lik = Likelihood::Gaussian {
            noise: NoiseModel::LearnedPrecision {
                shape: 3.0,
                rate: 1.0,
                initial_variance: 0.3,
            },
        };
        let m = LogDensityModel::new(net, part, PriorSpec::new(1.5).unwrap(), lik, 0.7, &data).unwrap();
        let q = m.initial_point();
        assert_eq!(q.len(), 6);
        let (_, g) = m.log_density_and_grad(&q, None).unwrap();
        for i in 0..q.len() {
            let h = 1e-5 * q[i].abs().max(1.0);
            let mut up = q.clone();
            up[i] += h;
            let mut dn = q.clone();
            dn[i] -= h;
            let fd = (m.log_density(&up).unwrap() - m.log_density(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-4), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gamma_prior_constant() {
        // Gamma(3, 1) log density at tau = 1 is log(1/2) - 1.
        let data = subset(array![[0.0, 0.0]], array![[0.0]]);
        let lik = Likelihood::Gaussian {
            noise: NoiseModel::LearnedPrecision {
                shape: 3.0,
                rate: 1.0,
                initial_variance: 1.0,
            },
        };
        let m = LogDensityModel::new(
            linear_net(vec![0.0; 3]),
            ParameterPartition::none(3),
            PriorSpec::new(1.0).unwrap(),
            lik,
            0.0,
            &data,
        )
        .unwrap();
        let v = m.log_density(&[0.0]).unwrap();
        assert!((v - (0.5f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_task_rejected() {
        let data = subset(array![[0.0, 0.0]], array![[0.0]]);
        assert!(LogDensityModel::new(
            linear_net(vec![0.0; 3]),
            ParameterPartition::all(3),
            PriorSpec::new(1.0).unwrap(),
            Likelihood::Categorical,
            1.0,
            &data
        )
        .is_err());
    }

    #[test]
    fn categorical_gradient() {
        let spec = ArchitectureSpec::mlp(&[2, 3, 3], Activation::Silu).unwrap();
        let net = Network::init(spec, &mut crate::rng::stream_rng(2, 0)).unwrap();
        let data = Subset {
            x: array![[0.5, -1.0], [1.0, 0.2]],
            y: array![[2.0], [0.0]],
            task: Task::Classification { n_classes: 3 },
        };
        let n = net.num_params();
        let m = LogDensityModel::new(
            net,
            ParameterPartition::all(n),
            PriorSpec::new(1.0).unwrap(),
            Likelihood::Categorical,
            1.0,
            &data,
        )
        .unwrap();
        let q = m.initial_point();
        let (_, g) = m.log_density_and_grad(&q, None).unwrap();
        for i in 0..q.len() {
            let h = 1e-5 * q[i].abs().max(1.0);
            let mut up = q.clone();
            up[i] += h;
            let mut dn = q.clone();
            dn[i] -= h;
            let fd = (m.log_density(&up).unwrap() - m.log_density(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-4));
        }
    }
}
