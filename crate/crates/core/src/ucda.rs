//! Constructive universal conditional distribution approximators.
//!
//! Four architectures inject Gaussian noise `Z = V eta + u` either at the
//! input (`a`) or as random biases of a hidden layer (`b`, `c`, `d`), with
//! first-layer weights chosen so that some hidden layer determines `[Z; x]`
//! exactly. The layers after it are an ordinary trainable network.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::AdamW;
use crate::inference::mfvi::softplus;
use crate::nn::{sigmoid, Activation, ArchitectureSpec, Network};
use crate::rng::{stream_rng, streams, Rng};

/// Recovery through `atanh` clamps pre-activations to this magnitude.
pub const ATANH_CLAMP: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UcdaTag {
    A,
    B,
    C,
    D,
}

impl fmt::Display for UcdaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UcdaTag::A => "a",
            UcdaTag::B => "b",
            UcdaTag::C => "c",
            UcdaTag::D => "d",
        })
    }
}

impl FromStr for UcdaTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(UcdaTag::A),
            "b" => Ok(UcdaTag::B),
            "c" => Ok(UcdaTag::C),
            "d" => Ok(UcdaTag::D),
            _ => Err(Error::InvalidConfig(format!("unknown architecture tag {s:?}"))),
        }
    }
}

impl UcdaTag {
    fn letter(self) -> char {
        self.to_string().chars().next().expect("one letter")
    }
}

/// Gaussian noise `Z = V eta + u` with `eta ~ N(0, I_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticUnitSpec {
    v: DMatrix<f64>,
    u: Vec<f64>,
    v_inv: DMatrix<f64>,
}

impl StochasticUnitSpec {
    pub fn new(v: DMatrix<f64>, u: Vec<f64>) -> Result<Self> {
        let m = u.len();
        if v.nrows() != m || v.ncols() != m || m == 0 {
            return Err(Error::dims("noise transform V", m, v.nrows()));
        }
        let v_inv = v
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("noise transform V is singular".into()))?;
        Ok(Self { v, u, v_inv })
    }

    /// `V = I`, `u = 0`.
    pub fn standard(m: usize) -> Result<Self> {
        Self::new(DMatrix::identity(m, m), vec![0.0; m])
    }

    /// Chooses `u_i = lambda * |V_i|` so that `Z >= 0` whenever
    /// `|eta| <= lambda`.
    pub fn positive_for_radius(v: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let u = (0..v.nrows()).map(|i| lambda * v.row(i).norm()).collect();
        Self::new(v, u)
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn z(&self, eta: &[f64]) -> Vec<f64> {
        let z = &self.v * DVector::from_column_slice(eta);
        z.iter().zip(&self.u).map(|(a, b)| a + b).collect()
    }

    pub fn eta(&self, z: &[f64]) -> Vec<f64> {
        let c = DVector::from_iterator(z.len(), z.iter().zip(&self.u).map(|(a, b)| a - b));
        (&self.v_inv * c).iter().copied().collect()
    }

    /// Ratio of extreme singular values of `V`.
    pub fn condition_number(&self) -> f64 {
        let s = self.v.clone().singular_values();
        let max = s.iter().copied().fold(0.0, f64::max);
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructiveNet {
    pub tag: UcdaTag,
    pub d: usize,
    pub m: usize,
    /// Network whose noise layer receives `Z` through its first `m` biases
    /// (for tag `a`, through the first `m` inputs).
    pub network: Network,
    pub noise: StochasticUnitSpec,
    /// Layer whose biases carry `Z`; `None` for tag `a`.
    pub noise_layer: Option<usize>,
    /// Hidden layer read by the recovery map; `None` means the input.
    pub recovery_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructiveOptions {
    pub output_dim: usize,
    /// Defaults: tanh for `a` and `b`, ReLU for `c` and `d`.
    pub activation: Option<Activation>,
    /// Hidden layers for tag `d` (noise layer, pass-through layers, then the
    /// arbitrary-width layer).
    pub hidden_layers: usize,
    /// Deterministic units per hidden layer for tag `d`; defaults to the
    /// minimum `2 max(d + m, n)`.
    pub deterministic_width: Option<usize>,
    pub noise: Option<StochasticUnitSpec>,
    /// Radius used by the default noise of tags `c` and `d`.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ConstructiveOptions {
    fn default() -> Self {
        Self {
            output_dim: 1,
            activation: None,
            hidden_layers: 3,
            deterministic_width: None,
            noise: None,
            lambda: 5.0,
            seed: 0,
        }
    }
}

fn width_error(tag: UcdaTag, constraint: impl Into<String>) -> Error {
    Error::WidthConstraint {
        tag: tag.letter(),
        constraint: constraint.into(),
    }
}

pub fn build_constructive(tag: UcdaTag, d: usize, m: usize, downstream_width: usize) -> Result<ConstructiveNet> {
    build_constructive_with(tag, d, m, downstream_width, &ConstructiveOptions::default())
}

pub fn build_constructive_with(
    tag: UcdaTag,
    d: usize,
    m: usize,
    downstream_width: usize,
    opts: &ConstructiveOptions,
) -> Result<ConstructiveNet> {
    let n = opts.output_dim;
    if d == 0 || m == 0 || n == 0 {
        return Err(width_error(tag, "d, m and the output dimension must be positive"));
    }
    if m < n {
        return Err(width_error(tag, format!("m = {m} must be at least the output dimension {n}")));
    }
    if downstream_width == 0 {
        return Err(width_error(tag, "the arbitrary-width layer needs at least one unit"));
    }
    let activation = opts.activation.unwrap_or(match tag {
        UcdaTag::A | UcdaTag::B => Activation::Tanh,
        UcdaTag::C | UcdaTag::D => Activation::Relu,
    });
    let noise = match &opts.noise {
        Some(s) => s.clone(),
        None => match tag {
            UcdaTag::A | UcdaTag::B => StochasticUnitSpec::standard(m)?,
            UcdaTag::C | UcdaTag::D => StochasticUnitSpec::positive_for_radius(DMatrix::identity(m, m), opts.lambda)?,
        },
    };
    if noise.m() != m {
        return Err(Error::dims("noise units", m, noise.m()));
    }
    let (dims, noise_layer, recovery_layer) = match tag {
        UcdaTag::A => (vec![m + d, downstream_width, n], None, None),
        UcdaTag::B => {
            if !activation.is_invertible() {
                return Err(width_error(tag, "needs an invertible activation"));
            }
            (vec![d, m + d, downstream_width, n], Some(0), Some(0))
        }
        UcdaTag::C => {
            if activation != Activation::Relu {
                return Err(width_error(tag, "needs ReLU activations"));
            }
            (vec![d, m + 2 * d, downstream_width, n], Some(0), Some(0))
        }
        UcdaTag::D => {
            if activation != Activation::Relu {
                return Err(width_error(tag, "this construction is built for ReLU activations"));
            }
            let min_det = 2 * (d + m).max(n);
            let det = opts.deterministic_width.unwrap_or(min_det);
            if det < min_det {
                return Err(width_error(
                    tag,
                    format!("each hidden layer needs at least 2 max(d + m, n) = {min_det} deterministic units, got {det}"),
                ));
            }
            if opts.hidden_layers < 2 {
                return Err(width_error(tag, "needs at least two hidden layers"));
            }
            let mut dims = vec![d, m + det];
            dims.extend(std::iter::repeat_n(det, opts.hidden_layers - 2));
            dims.push(downstream_width);
            dims.push(n);
            (dims, Some(0), Some(opts.hidden_layers - 2))
        }
    };
    let spec = ArchitectureSpec::mlp(&dims, activation)?;
    let mut rng = stream_rng(opts.seed, streams::UCDA);
    let mut net = Network::init(spec.clone(), &mut rng)?;
    let layouts = spec.layouts();
    if tag != UcdaTag::A {
        // Frozen construction layers up to and including the recovery layer.
        let theta = net.theta_mut();
        let upto = recovery_layer.expect("hidden recovery layer");
        for (li, l) in layouts.iter().enumerate().take(upto + 1) {
            for v in &mut theta[l.range()] {
                *v = 0.0;
            }
            let w = |r: usize, c: usize| l.weight_offset + r * l.fan_in + c;
            if li == 0 {
                for j in 0..d {
                    theta[w(m + j, j)] = 1.0;
                    if tag != UcdaTag::B {
                        theta[w(m + d + j, j)] = -1.0;
                    }
                }
            } else {
                for j in 0..l.fan_out.min(l.fan_in) {
                    theta[w(j, j)] = 1.0;
                }
            }
        }
    }
    Ok(ConstructiveNet {
        tag,
        d,
        m,
        network: net,
        noise,
        noise_layer,
        recovery_layer,
    })
}

fn inverse_activation(act: Activation, h: f64, clamps: &mut usize) -> f64 {
    match act {
        Activation::Tanh => {
            let a = h.atanh();
            if !a.is_finite() || a.abs() > ATANH_CLAMP {
                *clamps += 1;
                ATANH_CLAMP.copysign(h)
            } else {
                a
            }
        }
        Activation::LeakyRelu { slope } => {
            if h >= 0.0 {
                h
            } else {
                h / slope
            }
        }
        _ => h,
    }
}

impl ConstructiveNet {
    pub fn output_dim(&self) -> usize {
        self.network.spec().output_dim
    }

    /// The network with the given noise draw written into its biases.
    pub fn with_noise(&self, z: &[f64]) -> Result<Network> {
        let mut net = self.network.clone();
        if let Some(layer) = self.noise_layer {
            for (i, &v) in z.iter().enumerate() {
                net.set_bias(layer, i, v)?;
            }
        }
        Ok(net)
    }

    fn network_input(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        match self.tag {
            UcdaTag::A => z.iter().chain(x).copied().collect(),
            _ => x.to_vec(),
        }
    }

    /// Pre-activations of `layer` for one `(Z, x)`.
    pub fn pre_activations(&self, z: &[f64], x: &[f64], layer: usize) -> Result<Vec<f64>> {
        crate::nn::pre_activations(&self.with_noise(z)?, &self.network_input(z, x), layer)
    }

    /// Post-activations of every hidden layer for one `(Z, x)`.
    pub fn hidden_layers(&self, z: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let net = self.with_noise(z)?;
        let input = self.network_input(z, x);
        let xv = ndarray::ArrayView2::from_shape((1, input.len()), &input)
            .map_err(|_| Error::dims("input", self.network.spec().input_dim, input.len()))?;
        let trace = net.forward_trace(xv)?;
        Ok((0..self.network.spec().hidden_widths.len())
            .map(|i| trace.hidden(i).row(0).to_vec())
            .collect())
    }

    /// Applies the recovery map to the recovery layer's values. Returns
    /// `[Z; x]` and the number of clamp events.
    pub fn recover(&self, h: &[f64]) -> (Vec<f64>, usize) {
        let (m, d) = (self.m, self.d);
        let mut clamps = 0;
        let out = match self.tag {
            UcdaTag::A => h[..m + d].to_vec(),
            UcdaTag::B => {
                let act = self.network.spec().activation;
                h[..m + d].iter().map(|&v| inverse_activation(act, v, &mut clamps)).collect()
            }
            UcdaTag::C | UcdaTag::D => {
                let mut r = h[..m].to_vec();
                r.extend((0..d).map(|j| h[m + j] - h[m + d + j]));
                r
            }
        };
        (out, clamps)
    }

    /// `[Z; x]` reconstructed from a forward pass.
    pub fn recover_from(&self, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, usize)> {
        let h = match self.recovery_layer {
            None => self.network_input(z, x),
            Some(l) => self.hidden_layers(z, x)?.swap_remove(l),
        };
        Ok(self.recover(&h))
    }

    /// Equivalent network taking `[Z; x]` as input, with the noise biases
    /// turned into unit weights. Used for batched sampling and training.
    pub fn lifted(&self) -> Result<Network> {
        let Some(layer) = self.noise_layer else {
            return Ok(self.network.clone());
        };
        debug_assert_eq!(layer, 0);
        let spec = self.network.spec();
        let mut dims = spec.widths();
        dims[0] += self.m;
        let lspec = ArchitectureSpec::mlp(&dims, spec.activation)?;
        let mut lifted = Network::zeros(lspec.clone())?;
        let (src, dst) = (spec.layouts(), lspec.layouts());
        let theta = self.network.theta();
        let t = lifted.theta_mut();
        let (s0, d0) = (&src[0], &dst[0]);
        for r in 0..s0.fan_out {
            if r < self.m {
                t[d0.weight_offset + r * d0.fan_in + r] = 1.0;
            }
            for c in 0..s0.fan_in {
                t[d0.weight_offset + r * d0.fan_in + self.m + c] = theta[s0.weight_offset + r * s0.fan_in + c];
            }
            t[d0.bias_offset + r] = if r < self.m { 0.0 } else { theta[s0.bias_offset + r] };
        }
        let rest = src[1].weight_offset;
        t[dst[1].weight_offset..].copy_from_slice(&theta[rest..]);
        Ok(lifted)
    }

    /// Copies trainable downstream layers back from a lifted network.
    fn absorb_lifted(&mut self, lifted: &Network) {
        match self.noise_layer {
            None => self.network = lifted.clone(),
            Some(_) => {
                let start = self.network.spec().layouts()[1].weight_offset;
                let lstart = lifted.spec().layouts()[1].weight_offset;
                self.network.theta_mut()[start..].copy_from_slice(&lifted.theta()[lstart..]);
            }
        }
    }

    /// Mask of lifted-network parameters that training may change.
    fn trainable_mask(&self, lifted: &Network) -> Vec<bool> {
        let layouts = lifted.spec().layouts();
        let first = self.recovery_layer.map_or(0, |l| l + 1);
        let start = layouts[first].weight_offset;
        (0..lifted.num_params()).map(|i| i >= start).collect()
    }

    /// Samples of `f(Z, x)` for a fresh noise draw per sample.
    pub fn sample_outputs(&self, x: &[f64], n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let lifted = self.lifted()?;
        let input = self.noise_batch(&[x.to_vec()], n, rng);
        lifted.forward_batch(input.view())
    }

    /// Rows `[Z; x]`, `n` per grid point, grid-major.
    fn noise_batch(&self, grid: &[Vec<f64>], n: usize, rng: &mut Rng) -> Array2<f64> {
        let mut rows = Array2::zeros((grid.len() * n, self.m + self.d));
        for (g, x) in grid.iter().enumerate() {
            for s in 0..n {
                let eta: Vec<f64> = (0..self.m).map(|_| rng.sample(StandardNormal)).collect();
                let z = self.noise.z(&eta);
                let mut row = rows.row_mut(g * n + s);
                for (i, v) in z.iter().chain(x).enumerate() {
                    row[i] = *v;
                }
            }
        }
        rows
    }
}

/// Draws `eta` uniformly from the ball of radius `lambda`.
fn eta_in_ball(m: usize, lambda: f64, rng: &mut Rng) -> Vec<f64> {
    let dir: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    let r = lambda * u.powf(1.0 / m as f64);
    dir.into_iter().map(|v| v / norm * r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCertificate {
    pub tag: UcdaTag,
    pub d: usize,
    pub m: usize,
    pub max_recovery_error: f64,
    pub trials: usize,
    pub lambda: f64,
    pub clamp_events: usize,
    pub condition_number: f64,
}

/// Worst-case sup-norm error of the recovered `[Z; x]` over random draws
/// with `|eta| <= lambda` and `x` uniform in `input_box`.
pub fn verify_recovery(
    net: &ConstructiveNet,
    trials: usize,
    input_box: (f64, f64),
    lambda: f64,
    seed: u64,
) -> Result<RecoveryCertificate> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, streams::UCDA);
    let (lo, hi) = input_box;
    let mut worst: f64 = 0.0;
    let mut clamps = 0;
    for _ in 0..trials {
        let eta = eta_in_ball(net.m, lambda, &mut rng);
        let z = net.noise.z(&eta);
        let x: Vec<f64> = (0..net.d).map(|_| rng.random_range(lo..=hi)).collect();
        let (rec, c) = net.recover_from(&z, &x)?;
        clamps += c;
        for (r, t) in rec.iter().zip(z.iter().chain(&x)) {
            worst = worst.max((r - t).abs());
        }
    }
    Ok(RecoveryCertificate {
        tag: net.tag,
        d: net.d,
        m: net.m,
        max_recovery_error: worst,
        trials,
        lambda,
        clamp_events: clamps,
        condition_number: net.noise.condition_number(),
    })
}

/// Network with `extra` additional inputs appended whose outgoing weights
/// are zero.
pub fn append_ignored_inputs(net: &Network, extra: usize) -> Result<Network> {
    let spec = net.spec();
    let mut dims = spec.widths();
    dims[0] += extra;
    let mut wide_spec = ArchitectureSpec::mlp(&dims, spec.activation)?;
    wide_spec.parameterization = spec.parameterization;
    let mut wide = Network::zeros(wide_spec.clone())?;
    let (src, dst) = (&spec.layouts()[0], &wide_spec.layouts()[0]);
    let theta = net.theta();
    let t = wide.theta_mut();
    for r in 0..src.fan_out {
        for c in 0..src.fan_in {
            t[dst.weight_offset + r * dst.fan_in + c] = theta[src.weight_offset + r * src.fan_in + c];
        }
        t[dst.bias_offset + r] = theta[src.bias_offset + r];
    }
    let rest = src.end();
    t[dst.end()..].copy_from_slice(&theta[rest..]);
    Ok(wide)
}

/// A conditional distribution that can be sampled.
pub trait ConditionalSampler: Sync {
    fn output_dim(&self) -> usize;
    fn sample(&self, x: &[f64], rng: &mut Rng) -> Vec<f64>;
}

/// One-dimensional synthetic targets with known conditional moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticTarget {
    /// `Y = amp sin(freq x) + std * eps`.
    GaussianSine { amp: f64, freq: f64, std: f64 },
    /// `Y = +-1` with equal probability, independent of `x`.
    Rademacher,
}

impl SyntheticTarget {
    pub fn mean(&self, x: f64) -> f64 {
        match *self {
            SyntheticTarget::GaussianSine { amp, freq, .. } => amp * (freq * x).sin(),
            SyntheticTarget::Rademacher => 0.0,
        }
    }

    pub fn std(&self, _x: f64) -> f64 {
        match *self {
            SyntheticTarget::GaussianSine { std, .. } => std,
            SyntheticTarget::Rademacher => 1.0,
        }
    }
}

impl ConditionalSampler for SyntheticTarget {
    fn output_dim(&self) -> usize {
        1
    }

    fn sample(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        match *self {
            SyntheticTarget::GaussianSine { std, .. } => {
                let e: f64 = rng.sample(StandardNormal);
                vec![self.mean(x[0]) + std * e]
            }
            SyntheticTarget::Rademacher => vec![if rng.random::<bool>() { 1.0 } else { -1.0 }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    MomentMatch,
    EnergyDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub distance: Distance,
    pub steps: usize,
    pub lr: f64,
    /// Generator samples per grid point and step.
    pub samples: usize,
    /// Target samples per grid point: per step for the energy distance,
    /// once up front for the moment estimates.
    pub target_samples: usize,
    pub eval_samples: usize,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            distance: Distance::MomentMatch,
            steps: 2000,
            lr: 1e-2,
            samples: 64,
            target_samples: 64,
            eval_samples: 2000,
            cosine_decay: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorFit {
    pub net: ConstructiveNet,
    pub trace: Vec<f64>,
    /// Final distance at each grid point, from `eval_samples` draws.
    pub final_distance: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Squared mean and standard deviation mismatch, and its derivative with
/// respect to each sample.
fn moment_loss(f: &[f64], target_mean: f64, target_std: f64) -> (f64, Vec<f64>) {
    let n = f.len() as f64;
    let (m, s) = mean_std(f);
    let loss = (m - target_mean).powi(2) + (s - target_std).powi(2);
    let grad = f
        .iter()
        .map(|x| {
            let dm = 2.0 * (m - target_mean) / n;
            let ds = if s > 1e-12 && f.len() > 1 {
                2.0 * (s - target_std) * (x - m) / ((n - 1.0) * s)
            } else {
                0.0
            };
            dm + ds
        })
        .collect();
    (loss, grad)
}

/// Energy distance between two 1-D samples (V-statistic cross term,
/// U-statistic within terms) and its derivative with respect to `f`.
pub fn energy_distance(f: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let (s, t) = (f.len() as f64, y.len() as f64);
    let mut cross = 0.0;
    let mut grad = vec![0.0; f.len()];
    for (i, a) in f.iter().enumerate() {
        for b in y {
            cross += (a - b).abs();
            grad[i] += 2.0 * (a - b).signum() / (s * t);
        }
    }
    let mut within_f = 0.0;
    for (i, a) in f.iter().enumerate() {
        for (j, b) in f.iter().enumerate() {
            if i != j {
                within_f += (a - b).abs();
                grad[i] -= 2.0 * (a - b).signum() / (s * (s - 1.0));
            }
        }
    }
    let mut within_y = 0.0;
    for (i, a) in y.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if i != j {
                within_y += (a - b).abs();
            }
        }
    }
    let ed = 2.0 * cross / (s * t) - within_f / (s * (s - 1.0)) - within_y / (t * (t - 1.0));
    (ed, grad)
}

/// Trains the layers after the recovery layer so that the push-forward of
/// the noise matches `target` at each grid point. Only 1-D outputs.
pub fn train_conditional_generator(
    net: &ConstructiveNet,
    target: &dyn ConditionalSampler,
    grid: &[Vec<f64>],
    config: &GeneratorConfig,
) -> Result<GeneratorFit> {
    if net.output_dim() != 1 || target.output_dim() != 1 {
        return Err(Error::InvalidConfig("generator training supports one output".into()));
    }
    if grid.is_empty() || config.samples < 2 {
        return Err(Error::InvalidConfig("need a grid and at least two samples".into()));
    }
    let mut lifted = net.lifted()?;
    let mask = net.trainable_mask(&lifted);
    let mut opt = AdamW::new(lifted.num_params(), config.lr, 0.0);
    let mut rng = stream_rng(config.seed, streams::UCDA);
    let mut target_rng = stream_rng(config.seed, streams::DATA);
    let moments: Vec<(f64, f64)> = grid
        .iter()
        .map(|x| {
            let ys: Vec<f64> = (0..config.target_samples.max(2) * 16)
                .map(|_| target.sample(x, &mut target_rng)[0])
                .collect();
            mean_std(&ys)
        })
        .collect();
    let s = config.samples;
    let g = grid.len() as f64;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let input = net.noise_batch(grid, s, &mut rng);
        let tr = lifted.forward_trace(input.view())?;
        let out = tr.output();
        let mut d_out = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for (gi, x) in grid.iter().enumerate() {
            let f: Vec<f64> = (0..s).map(|k| out[[gi * s + k, 0]]).collect();
            let (l, grad) = match config.distance {
                Distance::MomentMatch => moment_loss(&f, moments[gi].0, moments[gi].1),
                Distance::EnergyDistance => {
                    let y: Vec<f64> = (0..config.target_samples.max(2))
                        .map(|_| target.sample(x, &mut target_rng)[0])
                        .collect();
                    energy_distance(&f, &y)
                }
            };
            loss += l / g;
            for (k, v) in grad.into_iter().enumerate() {
                d_out[[gi * s + k, 0]] = v / g;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                value: loss,
            });
        }
        trace.push(loss);
        let mut grad = vec![0.0; lifted.num_params()];
        lifted.backward(&tr, d_out.view(), &mut grad)?;
        for (gv, &m) in grad.iter_mut().zip(&mask) {
            if !m {
                *gv = 0.0;
            }
        }
        if config.cosine_decay {
            let frac = step as f64 / config.steps as f64;
            opt.lr = 0.5 * config.lr * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        opt.step(lifted.theta_mut(), &grad, None);
    }
    let mut fitted = net.clone();
    fitted.absorb_lifted(&lifted);
    let mut eval_rng = stream_rng(config.seed, streams::PREDICT);
    let final_distance = grid
        .iter()
        .zip(&moments)
        .map(|(x, &(tm, ts))| {
            let f: Vec<f64> = fitted.sample_outputs(x, config.eval_samples, &mut eval_rng)?.column(0).to_vec();
            Ok(match config.distance {
                Distance::MomentMatch => moment_loss(&f, tm, ts).0,
                Distance::EnergyDistance => {
                    let y: Vec<f64> = (0..config.eval_samples)
                        .map(|_| target.sample(x, &mut eval_rng)[0])
                        .collect();
                    energy_distance(&f, &y).0
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratorFit {
        net: fitted,
        trace,
        final_distance,
    })
}

/// Conditional mean and standard deviation of a generator at `x`.
pub fn conditional_moments(net: &ConstructiveNet, x: &[f64], n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let f = net.sample_outputs(x, n, rng)?;
    Ok(mean_std(&f.column(0).to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleConfig {
    /// Lower bound on every weight's standard deviation in the fully
    /// stochastic network.
    pub min_sigma: f64,
    pub width: usize,
    pub target: SyntheticTarget,
    pub x_range: (f64, f64),
    pub grid_points: usize,
    pub steps: usize,
    pub lr: f64,
    pub samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            min_sigma: 0.25,
            width: 32,
            target: SyntheticTarget::GaussianSine {
                amp: 1.0,
                freq: 2.0,
                std: 0.1,
            },
            x_range: (-2.0, 2.0),
            grid_points: 32,
            steps: 3000,
            lr: 1e-2,
            samples: 32,
            eval_samples: 4000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleResult {
    pub grid: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub full_mean: Vec<f64>,
    pub partial_mean: Vec<f64>,
    /// Largest conditional-mean error over the grid.
    pub full_err: f64,
    pub partial_err: f64,
}

fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn counterexample_targets(cfg: &CounterexampleConfig, grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter().map(|&x| (cfg.target.mean(x), cfg.target.std(x))).collect()
}

/// Per-sample loss gradients for moment matching on a grid: `f[s][g]`.
fn grid_moment_step(f: &[Vec<f64>], targets: &[(f64, f64)]) -> (f64, Vec<Vec<f64>>) {
    let s = f.len();
    let g = targets.len();
    let mut d = vec![vec![0.0; g]; s];
    let mut loss = 0.0;
    for (gi, &(tm, ts)) in targets.iter().enumerate() {
        let col: Vec<f64> = f.iter().map(|r| r[gi]).collect();
        let (l, grad) = moment_loss(&col, tm, ts);
        loss += l / g as f64;
        for (si, v) in grad.into_iter().enumerate() {
            d[si][gi] = v / g as f64;
        }
    }
    (loss, d)
}

fn base_spec(width: usize) -> Result<ArchitectureSpec> {
    ArchitectureSpec::mlp(&[1, width, width, 1], Activation::Tanh)
}

/// Fully stochastic network: every parameter independently Gaussian with
/// standard deviation `min_sigma + softplus(rho)`.
fn train_full(cfg: &CounterexampleConfig, grid: &[f64], targets: &[(f64, f64)]) -> Result<Vec<f64>> {
    let spec = base_spec(cfg.width)?;
    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut mu = Network::init(spec, &mut init_rng)?;
    let p = mu.num_params();
    let mut rho = vec![-5.0; p];
    let mut opt_mu = AdamW::new(p, cfg.lr, 0.0);
    let mut opt_rho = AdamW::new(p, cfg.lr, 0.0);
    let mut rng = stream_rng(cfg.seed, streams::MFVI);
    let x = Array2::from_shape_vec((grid.len(), 1), grid.to_vec()).expect("column");
    let sigma = |rho: &[f64]| -> Vec<f64> { rho.iter().map(|&r| cfg.min_sigma + softplus(r)).collect() };
    for step in 0..cfg.steps {
        let sg = sigma(&rho);
        let mut nets = Vec::with_capacity(cfg.samples);
        let mut eps_all = Vec::with_capacity(cfg.samples);
        let mut outs = Vec::with_capacity(cfg.samples);
        let mut traces = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let eps: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let theta: Vec<f64> = (0..p).map(|i| mu.theta()[i] + sg[i] * eps[i]).collect();
            let net = mu.with_theta(theta)?;
            let tr = net.forward_trace(x.view())?;
            outs.push(tr.output().column(0).to_vec());
            traces.push(tr);
            nets.push(net);
            eps_all.push(eps);
        }
        let (loss, d) = grid_moment_step(&outs, targets);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                value: loss,
            });
        }
        let mut g_mu = vec![0.0; p];
        let mut g_rho = vec![0.0; p];
        for (si, net) in nets.iter().enumerate() {
            let d_out = Array2::from_shape_vec((grid.len(), 1), d[si].clone()).expect("column");
            let mut g = vec![0.0; p];
            net.backward(&traces[si], d_out.view(), &mut g)?;
            for i in 0..p {
                g_mu[i] += g[i];
                g_rho[i] += g[i] * eps_all[si][i] * sigmoid(rho[i]);
            }
        }
        opt_mu.step(mu.theta_mut(), &g_mu, None);
        opt_rho.step(&mut rho, &g_rho, None);
        for r in &mut rho {
            *r = r.max(crate::inference::mfvi::RHO_FLOOR);
        }
    }
    let sg = sigma(&rho);
    let mut eval_rng = stream_rng(cfg.seed, streams::PREDICT);
    let mut mean = vec![0.0; grid.len()];
    for _ in 0..cfg.eval_samples {
        let theta: Vec<f64> = (0..p)
            .map(|i| mu.theta()[i] + sg[i] * eval_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let out = mu.with_theta(theta)?.forward_batch(x.view())?;
        for (m, o) in mean.iter_mut().zip(out.column(0)) {
            *m += o / cfg.eval_samples as f64;
        }
    }
    Ok(mean)
}

/// Deterministic network with one random first-layer bias of fixed mean 0
/// and variance 1, trained through its lifted form with input `[Z; x]`.
fn train_partial(cfg: &CounterexampleConfig, grid: &[f64], targets: &[(f64, f64)]) -> Result<Vec<f64>> {
    let spec = ArchitectureSpec::mlp(&[2, cfg.width, cfg.width, 1], Activation::Tanh)?;
    let base = Network::init(base_spec(cfg.width)?, &mut stream_rng(cfg.seed, streams::INIT))?;
    let mut net = Network::zeros(spec.clone())?;
    let (src, dst) = (base.spec().layouts(), spec.layouts());
    {
        let t = net.theta_mut();
        for r in 0..cfg.width {
            t[dst[0].weight_offset + r * 2 + 1] = base.theta()[src[0].weight_offset + r];
            t[dst[0].bias_offset + r] = base.theta()[src[0].bias_offset + r];
        }
        t[dst[0].weight_offset] = 1.0;
        t[dst[0].bias_offset] = 0.0;
        t[dst[1].weight_offset..].copy_from_slice(&base.theta()[src[1].weight_offset..]);
    }
    // The noise column and the random unit's bias stay fixed.
    let mut mask = vec![true; net.num_params()];
    for r in 0..cfg.width {
        mask[dst[0].weight_offset + r * 2] = false;
    }
    mask[dst[0].bias_offset] = false;
    let mut opt = AdamW::new(net.num_params(), cfg.lr, 0.0);
    let mut rng = stream_rng(cfg.seed, streams::UCDA);
    let g = grid.len();
    let s = cfg.samples;
    let batch = |rng: &mut Rng, s: usize| {
        let mut b = Array2::zeros((s * g, 2));
        for si in 0..s {
            for (gi, &x) in grid.iter().enumerate() {
                b[[si * g + gi, 0]] = rng.sample::<f64, _>(StandardNormal);
                b[[si * g + gi, 1]] = x;
            }
        }
        b
    };
    for step in 0..cfg.steps {
        let input = batch(&mut rng, s);
        let tr = net.forward_trace(input.view())?;
        let out = tr.output();
        let f: Vec<Vec<f64>> = (0..s).map(|si| (0..g).map(|gi| out[[si * g + gi, 0]]).collect()).collect();
        let (loss, d) = grid_moment_step(&f, targets);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                value: loss,
            });
        }
        let d_out = Array2::from_shape_fn((s * g, 1), |(r, _)| d[r / g][r % g]);
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&tr, d_out.view(), &mut grad)?;
        for (gv, &m) in grad.iter_mut().zip(&mask) {
            if !m {
                *gv = 0.0;
            }
        }
        opt.step(net.theta_mut(), &grad, None);
    }
    let mut eval_rng = stream_rng(cfg.seed, streams::PREDICT);
    let out = net.forward_batch(batch(&mut eval_rng, cfg.eval_samples).view())?;
    let mut mean = vec![0.0; g];
    for (r, o) in out.column(0).iter().enumerate() {
        mean[r % g] += o / cfg.eval_samples as f64;
    }
    Ok(mean)
}

/// Trains a fully stochastic network with bounded-below weight variances
/// and a network with a single random bias to match the conditional mean
/// and standard deviation of `cfg.target`, and reports how well each
/// matches the conditional mean.
pub fn moment_match_counterexample(cfg: &CounterexampleConfig) -> Result<CounterexampleResult> {
    if cfg.grid_points == 0 || cfg.samples < 2 || cfg.width == 0 {
        return Err(Error::InvalidConfig("grid_points, width > 0 and samples >= 2 required".into()));
    }
    let grid = grid_1d(cfg.x_range.0, cfg.x_range.1, cfg.grid_points);
    let targets = counterexample_targets(cfg, &grid);
    let full_mean = train_full(cfg, &grid, &targets)?;
    let partial_mean = train_partial(cfg, &grid, &targets)?;
    let err = |m: &[f64]| m.iter().zip(&targets).map(|(a, (t, _))| (a - t).abs()).fold(0.0, f64::max);
    Ok(CounterexampleResult {
        full_err: err(&full_mean),
        partial_err: err(&partial_mean),
        target_mean: targets.iter().map(|t| t.0).collect(),
        grid,
        full_mean,
        partial_mean,
    })
}
