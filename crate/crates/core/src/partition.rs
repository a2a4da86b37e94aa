//! Stochastic/deterministic parameter partitions and the subset prior.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, ParamKind};

/// Names a dense layer by role. `Hidden(i)` is the layer producing hidden
/// layer `i` (0-based), so `Hidden(0)` and `Input` coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerDesignator {
    Input,
    Hidden(usize),
    Output,
}

impl LayerDesignator {
    pub fn layer_index(self, spec: &ArchitectureSpec) -> Result<usize> {
        let n = spec.num_layers();
        match self {
            LayerDesignator::Input => Ok(0),
            LayerDesignator::Output => Ok(n - 1),
            LayerDesignator::Hidden(i) if i < spec.hidden_widths.len() => Ok(i),
            LayerDesignator::Hidden(i) => Err(Error::UnknownLayer(format!(
                "hidden:{i} (network has {} hidden layers)",
                spec.hidden_widths.len()
            ))),
        }
    }
}

impl fmt::Display for LayerDesignator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDesignator::Input => f.write_str("input"),
            LayerDesignator::Hidden(i) => write!(f, "hidden:{i}"),
            LayerDesignator::Output => f.write_str("output"),
        }
    }
}

impl FromStr for LayerDesignator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "input" => Ok(LayerDesignator::Input),
            "output" => Ok(LayerDesignator::Output),
            other => other
                .strip_prefix("hidden:")
                .and_then(|i| i.parse().ok())
                .map(LayerDesignator::Hidden)
                .ok_or_else(|| Error::UnknownLayer(other.to_owned())),
        }
    }
}

impl Serialize for LayerDesignator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerDesignator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which parameters of a named layer are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerParts {
    #[default]
    WeightsAndBiases,
    WeightsOnly,
    BiasesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionOrigin {
    ByLayer {
        layers: Vec<LayerDesignator>,
        #[serde(default)]
        parts: LayerParts,
    },
    TopAbsMap {
        k: usize,
    },
    TopSwagVariance {
        k: usize,
    },
    All,
    None,
    Custom,
}

/// Boolean mask over flat parameter indices: `true` marks the stochastic
/// set, `false` the deterministic one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPartition {
    mask: Vec<bool>,
    origin: PartitionOrigin,
}

impl ParameterPartition {
    pub fn all(n: usize) -> Self {
        Self {
            mask: vec![true; n],
            origin: PartitionOrigin::All,
        }
    }

    pub fn none(n: usize) -> Self {
        Self {
            mask: vec![false; n],
            origin: PartitionOrigin::None,
        }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self {
            mask,
            origin: PartitionOrigin::Custom,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn origin(&self) -> &PartitionOrigin {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_stochastic(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn stochastic_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn deterministic_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn is_all(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Extracts the stochastic coordinates of a full parameter vector.
    pub fn gather(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(theta.len())?;
        Ok(theta
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect())
    }

    /// Writes `theta_s` into the stochastic coordinates of `theta`.
    pub fn scatter(&self, theta: &mut [f64], theta_s: &[f64]) -> Result<()> {
        self.check_len(theta.len())?;
        let k = self.num_stochastic();
        if theta_s.len() != k {
            return Err(Error::dims("stochastic subvector", k, theta_s.len()));
        }
        let mut src = theta_s.iter();
        for (t, &m) in theta.iter_mut().zip(&self.mask) {
            if m {
                *t = *src.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.mask.len() {
            return Err(Error::dims("partition mask", self.mask.len(), n));
        }
        Ok(())
    }

    pub fn to_json(&self) -> PartitionJson {
        let (k, layers, parts) = match &self.origin {
            PartitionOrigin::TopAbsMap { k } | PartitionOrigin::TopSwagVariance { k } => {
                (Some(*k), None, None)
            }
            PartitionOrigin::ByLayer { layers, parts } => (None, Some(layers.clone()), Some(*parts)),
            _ => (None, None, None),
        };
        PartitionJson {
            origin: origin_name(&self.origin).to_owned(),
            k,
            layers,
            parts,
            len: self.mask.len(),
            mask_runlength: RunLength::encode(&self.mask),
        }
    }

    pub fn from_json(json: &PartitionJson) -> Result<Self> {
        let mask = json.mask_runlength.decode();
        if mask.len() != json.len {
            return Err(Error::dims("decoded mask", json.len, mask.len()));
        }
        let origin = match json.origin.as_str() {
            "all" => PartitionOrigin::All,
            "none" => PartitionOrigin::None,
            "custom" => PartitionOrigin::Custom,
            "top_abs_map" => PartitionOrigin::TopAbsMap {
                k: json.k.ok_or_else(|| Error::InvalidConfig("missing k".into()))?,
            },
            "top_swag_variance" => PartitionOrigin::TopSwagVariance {
                k: json.k.ok_or_else(|| Error::InvalidConfig("missing k".into()))?,
            },
            "by_layer" => PartitionOrigin::ByLayer {
                layers: json.layers.clone().unwrap_or_default(),
                parts: json.parts.unwrap_or_default(),
            },
            other => return Err(Error::InvalidConfig(format!("unknown origin {other:?}"))),
        };
        Ok(Self { mask, origin })
    }
}

fn origin_name(origin: &PartitionOrigin) -> &'static str {
    match origin {
        PartitionOrigin::ByLayer { .. } => "by_layer",
        PartitionOrigin::TopAbsMap { .. } => "top_abs_map",
        PartitionOrigin::TopSwagVariance { .. } => "top_swag_variance",
        PartitionOrigin::All => "all",
        PartitionOrigin::None => "none",
        PartitionOrigin::Custom => "custom",
    }
}

/// Run-length encoded boolean mask: alternating runs beginning with `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLength {
    pub start: bool,
    pub runs: Vec<usize>,
}

impl RunLength {
    pub fn encode(mask: &[bool]) -> Self {
        let start = mask.first().copied().unwrap_or(false);
        let mut runs = Vec::new();
        let mut current = start;
        let mut count = 0;
        for &m in mask {
            if m == current {
                count += 1;
            } else {
                runs.push(count);
                current = m;
                count = 1;
            }
        }
        if count > 0 {
            runs.push(count);
        }
        Self { start, runs }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.runs.iter().sum());
        let mut value = self.start;
        for &r in &self.runs {
            out.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionJson {
    pub origin: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layers: Option<Vec<LayerDesignator>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parts: Option<LayerParts>,
    pub len: usize,
    pub mask_runlength: RunLength,
}

pub fn select_by_layer(spec: &ArchitectureSpec, layers: &[LayerDesignator]) -> Result<ParameterPartition> {
    select_by_layer_parts(spec, layers, LayerParts::WeightsAndBiases)
}

pub fn select_by_layer_parts(
    spec: &ArchitectureSpec,
    layers: &[LayerDesignator],
    parts: LayerParts,
) -> Result<ParameterPartition> {
    let n = spec.num_params();
    if layers.is_empty() {
        return Ok(ParameterPartition::none(n));
    }
    let layouts = spec.layouts();
    let mut mask = vec![false; n];
    for d in layers {
        let l = layouts[d.layer_index(spec)?];
        for (i, coord) in l.range().zip(l.range().map(|i| spec.coord_of(i))) {
            let kind = coord?.kind;
            mask[i] = match parts {
                LayerParts::WeightsAndBiases => true,
                LayerParts::WeightsOnly => kind == ParamKind::Weight,
                LayerParts::BiasesOnly => kind == ParamKind::Bias,
            } || mask[i];
        }
    }
    let mut unique = layers.to_vec();
    unique.dedup();
    Ok(ParameterPartition {
        mask,
        origin: PartitionOrigin::ByLayer {
            layers: unique,
            parts,
        },
    })
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::KOutOfRange {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

fn mask_from(n: usize, selected: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in selected {
        mask[i] = true;
    }
    mask
}

/// The `k` parameters of largest magnitude under the MAP solution, chosen
/// globally over the flat vector (weights and biases alike).
pub fn select_top_abs_map(theta_map: &[f64], k: usize) -> Result<ParameterPartition> {
    let scores: Vec<f64> = theta_map.iter().map(|t| t.abs()).collect();
    let selected = top_k_indices(&scores, k)?;
    let mask = mask_from(theta_map.len(), &selected);
    Ok(ParameterPartition {
        origin: if k == theta_map.len() {
            PartitionOrigin::All
        } else {
            PartitionOrigin::TopAbsMap { k }
        },
        mask,
    })
}

/// The `k` parameters with the largest diagonal variance under a SWAG fit
/// over the full parameter vector.
pub fn select_top_variance(diag_variance: &[f64], k: usize) -> Result<ParameterPartition> {
    let selected = top_k_indices(diag_variance, k)?;
    let mask = mask_from(diag_variance.len(), &selected);
    Ok(ParameterPartition {
        origin: if k == diag_variance.len() {
            PartitionOrigin::All
        } else {
            PartitionOrigin::TopSwagVariance { k }
        },
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleRule {
    #[default]
    NoRescale,
    /// Multiply the base variance by `|theta| / |theta_S|`.
    CountRatio,
}

/// Isotropic Gaussian prior shared by every stochastic parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default)]
    pub mean: f64,
    pub variance: f64,
    #[serde(default)]
    pub rescale: RescaleRule,
}

impl PriorSpec {
    pub fn new(variance: f64) -> Result<Self> {
        let p = Self {
            mean: 0.0,
            variance,
            rescale: RescaleRule::NoRescale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_rescale(mut self, rescale: RescaleRule) -> Self {
        self.rescale = rescale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "prior variance must be positive and finite, got {}",
                self.variance
            )));
        }
        Ok(())
    }
}

/// Variance applied to the stochastic subset.
pub fn effective_prior(prior: &PriorSpec, partition: &ParameterPartition, total_params: usize) -> Result<f64> {
    prior.validate()?;
    match prior.rescale {
        RescaleRule::NoRescale => Ok(prior.variance),
        RescaleRule::CountRatio => {
            let k = partition.num_stochastic();
            if k == 0 {
                return Err(Error::EmptyStochasticSet("count-ratio prior rescaling"));
            }
            Ok(prior.variance * total_params as f64 / k as f64)
        }
    }
}
