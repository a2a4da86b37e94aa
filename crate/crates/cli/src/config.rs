//! Experiment configuration: a strict schema read from TOML or JSON.

use std::path::{Path, PathBuf};

use partial_bnn::inference::{HmcConfig, LaplaceConfig, MapConfig, MfviConfig, SwagConfig};
use partial_bnn::nn::Parameterization;
use partial_bnn::partition::{LayerDesignator, LayerParts};
use partial_bnn::{Activation, ArchitectureSpec, Likelihood, PriorSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub prior: PriorSpec,
    /// Gaussian with unit variance for regression and categorical for
    /// classification when omitted.
    #[serde(default)]
    pub likelihood: Option<Likelihood>,
    #[serde(default = "one")]
    pub temperature: f64,
    /// Stage-one MAP training, used whenever a backend or partition needs a
    /// MAP network.
    #[serde(default)]
    pub map: MapConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "Metric::all")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Persist each fitted posterior under `seed_<s>/`.
    #[serde(default)]
    pub save_posterior: bool,
    /// Persist per-chain test-set class probabilities for `diagnose`
    /// (classification with HMC only).
    #[serde(default)]
    pub save_chain_predictions: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// 50 points around a gap, split 70/20/10.
    SineSmall,
    /// 1400 points around a gap, split 70/20/10.
    SineLarge,
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        targets: Vec<String>,
        /// Integer class labels in a single target column.
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default = "yes")]
        normalize: bool,
        #[serde(default = "yes")]
        normalize_targets: bool,
        #[serde(default)]
        split: SplitConfig,
    },
}

/// The split seed is the run seed, so a list of seeds is a list of splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Standard {
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Fraction of the non-test rows held out for validation.
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Gap {
        feature: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Standard {
            test_fraction: default_test_fraction(),
            val_fraction: default_val_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    LeakyRelu,
    Tanh,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub hidden: Vec<usize>,
    pub activation: ActivationName,
    #[serde(default)]
    pub leaky_slope: Option<f64>,
    #[serde(default)]
    pub parameterization: Parameterization,
}

impl ArchitectureConfig {
    pub fn activation(&self) -> Activation {
        match self.activation {
            ActivationName::Relu => Activation::Relu,
            ActivationName::LeakyRelu => Activation::LeakyRelu {
                slope: self.leaky_slope.unwrap_or(Activation::DEFAULT_LEAKY_SLOPE),
            },
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Silu => Activation::Silu,
        }
    }

    pub fn spec(&self, input_dim: usize, output_dim: usize) -> Result<ArchitectureSpec> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(output_dim);
        let mut spec = ArchitectureSpec::mlp(&dims, self.activation())?;
        spec.parameterization = self.parameterization;
        Ok(spec)
    }
}

/// Size of a magnitude- or variance-ranked subset: an absolute count or a
/// fraction of all parameters (rounded up, at least one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSize {
    K(usize),
    Fraction(f64),
}

impl SubsetSize {
    pub fn resolve(self, total: usize) -> Result<usize> {
        match self {
            SubsetSize::K(k) if (1..=total).contains(&k) => Ok(k),
            SubsetSize::K(k) => Err(CliError::Invalid(format!("k = {k} outside 1..={total}"))),
            SubsetSize::Fraction(f) if f > 0.0 && f <= 1.0 => {
                Ok(((f * total as f64).ceil() as usize).clamp(1, total))
            }
            SubsetSize::Fraction(f) => Err(CliError::Invalid(format!("fraction {f} outside (0, 1]"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    #[default]
    All,
    None,
    Layers {
        layers: Vec<LayerDesignator>,
        #[serde(default)]
        parts: LayerParts,
    },
    TopAbsMap {
        #[serde(default)]
        k: Option<usize>,
        #[serde(default)]
        fraction: Option<f64>,
    },
    TopSwagVariance {
        #[serde(default)]
        k: Option<usize>,
        #[serde(default)]
        fraction: Option<f64>,
        #[serde(default)]
        swag: SwagConfig,
    },
}

impl PartitionConfig {
    pub fn needs_map(&self) -> bool {
        matches!(self, PartitionConfig::TopAbsMap { .. } | PartitionConfig::TopSwagVariance { .. })
    }

    pub fn size(&self) -> Result<Option<SubsetSize>> {
        let pick = |k: Option<usize>, fraction: Option<f64>| match (k, fraction) {
            (Some(k), None) => Ok(Some(SubsetSize::K(k))),
            (None, Some(f)) => Ok(Some(SubsetSize::Fraction(f))),
            _ => Err(CliError::Schema {
                path: "partition".into(),
                message: "exactly one of `k` and `fraction` is required".into(),
            }),
        };
        match self {
            PartitionConfig::TopAbsMap { k, fraction } | PartitionConfig::TopSwagVariance { k, fraction, .. } => {
                pick(*k, *fraction)
            }
            _ => Ok(None),
        }
    }

    /// Same ranking rule with a different subset size.
    pub fn with_size(&self, size: SubsetSize) -> Result<Self> {
        let (k, fraction) = match size {
            SubsetSize::K(k) => (Some(k), None),
            SubsetSize::Fraction(f) => (None, Some(f)),
        };
        match self {
            PartitionConfig::TopAbsMap { .. } => Ok(PartitionConfig::TopAbsMap { k, fraction }),
            PartitionConfig::TopSwagVariance { swag, .. } => Ok(PartitionConfig::TopSwagVariance {
                k,
                fraction,
                swag: swag.clone(),
            }),
            _ => Err(CliError::Schema {
                path: "partition.kind".into(),
                message: "a sweep needs a top_abs_map or top_swag_variance partition".into(),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PartitionConfig::All => "all",
            PartitionConfig::None => "none",
            PartitionConfig::Layers { .. } => "layers",
            PartitionConfig::TopAbsMap { .. } => "top_abs_map",
            PartitionConfig::TopSwagVariance { .. } => "top_swag_variance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Map,
    Mfvi(MfviConfig),
    Hmc(HmcConfig),
    Laplace(LaplaceConfig),
    Swag(SwagConfig),
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Map => "map",
            BackendConfig::Mfvi(_) => "mfvi",
            BackendConfig::Hmc(_) => "hmc",
            BackendConfig::Laplace(_) => "laplace",
            BackendConfig::Swag(_) => "swag",
        }
    }

    /// Backends that start from a MAP network.
    pub fn needs_map(&self) -> bool {
        !matches!(self, BackendConfig::Mfvi(_))
    }

    /// Copy with every backend seed replaced by `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut b = self.clone();
        match &mut b {
            BackendConfig::Map | BackendConfig::Laplace(_) => {}
            BackendConfig::Mfvi(c) => c.seed = seed,
            BackendConfig::Hmc(c) => c.seed = seed,
            BackendConfig::Swag(c) => c.seed = seed,
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Monte Carlo draws per prediction. Sample sets default to every
    /// stored draw, other posteriors to [`DEFAULT_PREDICT_SAMPLES`].
    #[serde(default)]
    pub predict_samples: Option<usize>,
    /// Raw-unit input grid for `predictive.csv` on 1D regression tasks;
    /// defaults to the data range padded by half a unit on either side.
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

pub const DEFAULT_PREDICT_SAMPLES: usize = 200;
pub const DEFAULT_GRID_POINTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nll,
    Rmse,
    Accuracy,
    Ece,
    Coverage,
}

impl Metric {
    pub fn all() -> Vec<Metric> {
        vec![Metric::Nll, Metric::Rmse, Metric::Accuracy, Metric::Ece, Metric::Coverage]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub fractions: Vec<f64>,
}

impl SweepConfig {
    pub fn sizes(&self) -> Result<Vec<SubsetSize>> {
        if self.ks.is_empty() == self.fractions.is_empty() {
            return Err(CliError::Schema {
                path: "sweep".into(),
                message: "exactly one of `ks` and `fractions` must be non-empty".into(),
            });
        }
        Ok(self
            .ks
            .iter()
            .map(|&k| SubsetSize::K(k))
            .chain(self.fractions.iter().map(|&f| SubsetSize::Fraction(f)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

/// A validated configuration with its canonical JSON form.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub canonical: serde_json::Value,
    /// Directory relative dataset paths resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, Format::from_path(path), base_dir)
    }

    pub fn parse(text: &str, format: Format, base_dir: PathBuf) -> Result<Self> {
        let raw: serde_json::Value = match format {
            Format::Toml => toml::from_str(text).map_err(|e| CliError::Schema {
                path: ".".into(),
                message: e.to_string(),
            })?,
            Format::Json => serde_json::from_str(text).map_err(|e| CliError::Schema {
                path: ".".into(),
                message: e.to_string(),
            })?,
        };
        let config: ExperimentConfig = serde_path_to_error::deserialize(&raw).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(Self {
            config,
            canonical: raw,
            base_dir,
        })
    }

    /// SHA-256 of the canonical JSON (sorted keys, no whitespace).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical).expect("JSON values always serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn dataset_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl ExperimentConfig {
    /// Checks that cannot be expressed in the serde schema.
    pub fn validate(&self) -> Result<()> {
        let schema = |path: &str, message: &str| {
            Err(CliError::Schema {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.seeds.is_empty() {
            return schema("seeds", "at least one seed is required");
        }
        if self.architecture.hidden.contains(&0) {
            return schema("architecture.hidden", "hidden widths must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return schema("temperature", "must be positive and finite");
        }
        if let Err(e) = self.prior.validate() {
            return schema("prior.variance", &e.to_string());
        }
        if self.metrics.is_empty() {
            return schema("metrics", "at least one metric is required");
        }
        if let Some(g) = &self.evaluation.grid {
            if g.points == 0 || g.hi.partial_cmp(&g.lo) != Some(std::cmp::Ordering::Greater) {
                return schema("evaluation.grid", "needs lo < hi and points > 0");
            }
        }
        if matches!(self.backend, BackendConfig::Map) && !matches!(self.partition, PartitionConfig::All | PartitionConfig::None) {
            // MAP ignores the partition; a subset would be silently unused.
            return schema("partition", "the map backend takes no stochastic subset");
        }
        if !matches!(self.backend, BackendConfig::Map) && matches!(self.partition, PartitionConfig::None) {
            return schema("partition", "an empty stochastic subset only works with the map backend");
        }
        self.partition.size()?;
        if let Some(s) = &self.sweep {
            s.sizes()?;
            self.partition.with_size(SubsetSize::K(1))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "sine_small"

        [architecture]
        hidden = [8]
        activation = "tanh"

        [prior]
        variance = 1.0

        [backend]
        kind = "map"
    "#;

    fn parse(s: &str) -> Result<LoadedConfig> {
        LoadedConfig::parse(s, Format::Toml, PathBuf::new())
    }

    #[test]
    fn minimal_defaults() {
        let c = parse(MINIMAL).unwrap().config;
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.partition, PartitionConfig::All);
        assert_eq!(c.metrics.len(), 5);
        assert_eq!(c.temperature, 1.0);
    }

    #[test]
    fn unknown_key_names_path() {
        let e = parse(&MINIMAL.replace("hidden = [8]", "hidden = [8]\nwidth = 3")).unwrap_err();
        match e {
            CliError::Schema { path, message } => {
                assert_eq!(path, "architecture.width");
                assert!(message.contains("width"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_backend_names_field() {
        let e = parse(&MINIMAL.replace("kind = \"map\"", "kind = \"nuts\"")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("backend"), "{e}");
    }

    #[test]
    fn backend_params_are_strict() {
        let text = MINIMAL.replace("kind = \"map\"", "kind = \"hmc\"\nchains = 2\nleapfrog = 3");
        let e = parse(&text).unwrap_err();
        assert!(e.to_string().contains("leapfrog"), "{e}");
        let ok = parse(&MINIMAL.replace("kind = \"map\"", "kind = \"hmc\"\nchains = 2")).unwrap();
        assert!(matches!(ok.config.backend, BackendConfig::Hmc(HmcConfig { chains: 2, .. })));
    }

    #[test]
    fn hash_ignores_whitespace_and_key_order() {
        let a = parse(MINIMAL).unwrap().hash();
        let reordered = r#"
            [backend]
            kind="map"
            [prior]
            variance=1.0
            [architecture]
            activation="tanh"
            hidden=[ 8 ]
            [dataset]
            kind="sine_small"
        "#;
        assert_eq!(parse(reordered).unwrap().hash(), a);
        assert_ne!(parse(&MINIMAL.replace("[8]", "[9]")).unwrap().hash(), a);
    }

    #[test]
    fn json_is_accepted() {
        let json = r#"{"dataset":{"kind":"sine_small"},"architecture":{"hidden":[8],"activation":"tanh"},
            "prior":{"variance":1.0},"backend":{"kind":"map"}}"#;
        let j = LoadedConfig::parse(json, Format::Json, PathBuf::new()).unwrap();
        assert_eq!(j.hash(), parse(MINIMAL).unwrap().hash());
    }

    #[test]
    fn subset_sizes() {
        assert_eq!(SubsetSize::Fraction(0.25).resolve(10).unwrap(), 3);
        assert_eq!(SubsetSize::Fraction(1.0).resolve(10).unwrap(), 10);
        assert_eq!(SubsetSize::Fraction(1e-9).resolve(10).unwrap(), 1);
        assert!(SubsetSize::K(11).resolve(10).is_err());
        assert!(SubsetSize::Fraction(0.0).resolve(10).is_err());
    }

    #[test]
    fn sweep_requires_ranked_partition() {
        let text = MINIMAL.replace("kind = \"map\"", "kind = \"hmc\"") + "\n[sweep]\nks = [1, 2]\n";
        assert!(parse(&text).is_err());
        let text = text.replace("[sweep]", "[partition]\nkind = \"top_abs_map\"\nk = 1\n[sweep]");
        assert!(parse(&text).is_ok());
    }
}
