//! Experiment execution: data, MAP stage, partition, posterior backend and
//! evaluation for each seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use partial_bnn::data::{self, SineConfig, SplitKind};
use partial_bnn::diagnostics::write_chain_blob;
use partial_bnn::inference::laplace::prior_precision_grid;
use partial_bnn::inference::{
    fit_laplace, fit_swag, run_hmc, softmax, train_map, train_mfvi, tune_prior_precision, LaplacePosterior, MapConfig,
    PredictiveMode,
};
use partial_bnn::partition::{select_by_layer_parts, select_top_abs_map, select_top_variance, PartitionJson};
use partial_bnn::predictive::{draw_outputs, predict, predict_linearized, predict_point};
use partial_bnn::rng::{stream_rng, streams};
use partial_bnn::{
    ArchitectureSpec, Dataset, Likelihood, LogDensityModel, MetricsReport, Network, ParameterPartition,
    PosteriorApproximation, PredictiveResult, PriorSpec, Subset, Task,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    BackendConfig, DatasetConfig, ExperimentConfig, LoadedConfig, PartitionConfig, SplitConfig,
    DEFAULT_GRID_POINTS, DEFAULT_PREDICT_SAMPLES,
};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Map,
    Posterior,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Map => "map",
            Stage::Posterior => "posterior",
        }
    }
}

/// Test-set metrics of one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub stage: Stage,
    pub backend: String,
    pub partition: String,
    /// Number of stochastic parameters.
    pub k: usize,
    pub num_params: usize,
    pub metrics: MetricsReport,
    /// Backend and region summaries, e.g. acceptance rates or the mean
    /// predictive std inside and between the data regions of the sine tasks.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

/// Predictive mean and std over a raw-unit 1D input grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCurve {
    pub seed: u64,
    pub stage: Stage,
    pub k: usize,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SeedOutput {
    pub records: Vec<RunRecord>,
    pub curves: Vec<GridCurve>,
}

/// Data and model pieces shared by every stage of one seed.
pub struct Prepared {
    pub data: Dataset,
    pub spec: ArchitectureSpec,
    pub likelihood: Likelihood,
    pub sine: Option<SineConfig>,
    pub seed: u64,
}

impl Prepared {
    pub fn new(loaded: &LoadedConfig, seed: u64) -> Result<Self> {
        let cfg = &loaded.config;
        let (data, sine) = load_dataset(loaded, seed)?;
        let spec = cfg.architecture.spec(data.input_dim(), data.output_dim())?;
        let likelihood = match (cfg.likelihood, data.task()) {
            (Some(l), _) => l,
            (None, Task::Regression) => Likelihood::gaussian(1.0),
            (None, Task::Classification { .. }) => Likelihood::Categorical,
        };
        Ok(Self {
            data,
            spec,
            likelihood,
            sine,
            seed,
        })
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn validation(&self) -> Option<Subset> {
        let v = self.data.validation();
        (!v.is_empty()).then_some(v)
    }

    fn model(&self, base: Network, partition: ParameterPartition, prior: PriorSpec, temperature: f64) -> Result<LogDensityModel> {
        Ok(LogDensityModel::new(
            base,
            partition,
            prior,
            self.likelihood,
            temperature,
            &self.data.train(),
        )?)
    }

    fn init_network(&self) -> Result<Network> {
        Ok(Network::init(self.spec.clone(), &mut stream_rng(self.seed, streams::INIT))?)
    }

    fn noise_variance(&self) -> f64 {
        self.likelihood.noise_variance().unwrap_or(0.0)
    }
}

pub fn load_dataset(loaded: &LoadedConfig, seed: u64) -> Result<(Dataset, Option<SineConfig>)> {
    Ok(match &loaded.config.dataset {
        DatasetConfig::SineSmall => (SineConfig::small().generate(seed)?, Some(SineConfig::small())),
        DatasetConfig::SineLarge => (SineConfig::large().generate(seed)?, Some(SineConfig::large())),
        DatasetConfig::Csv {
            path,
            targets,
            classes,
            normalize,
            normalize_targets,
            split,
        } => {
            let path = loaded.dataset_path(path);
            let raw = data::load_csv(&path, targets, false)?;
            let ds = match classes {
                Some(n) => Dataset::new(
                    raw.raw_x().clone(),
                    raw.raw_y().clone(),
                    Task::Classification { n_classes: *n },
                )?,
                None => raw,
            };
            let kind = match *split {
                SplitConfig::Standard {
                    test_fraction,
                    val_fraction,
                } => SplitKind::Standard {
                    test_fraction,
                    val_fraction: val_fraction * (1.0 - test_fraction),
                    seed,
                },
                SplitConfig::Gap { feature, val_fraction } => SplitKind::Gap {
                    feature,
                    val_fraction,
                    seed,
                },
            };
            let ds = data::make_split(&ds, &kind)?.normalized(*normalize, *normalize_targets);
            (ds, None)
        }
    })
}

/// MAP over every parameter with the base prior variance.
pub fn train_stage_one(cfg: &ExperimentConfig, p: &Prepared) -> Result<Network> {
    let n = p.num_params();
    let prior = PriorSpec {
        rescale: Default::default(),
        ..cfg.prior
    };
    let model = p.model(p.init_network()?, ParameterPartition::all(n), prior, 1.0)?;
    let map_cfg = MapConfig {
        seed: p.seed,
        ..cfg.map.clone()
    };
    Ok(train_map(&model, p.validation().as_ref(), &map_cfg)?.network)
}

pub fn resolve_partition(cfg: &ExperimentConfig, pc: &PartitionConfig, p: &Prepared, map: Option<&Network>) -> Result<ParameterPartition> {
    let n = p.num_params();
    let need_map = || {
        map.ok_or_else(|| CliError::Invalid(format!("the {} partition needs a MAP network", pc.label())))
    };
    let size = |pc: &PartitionConfig| -> Result<usize> {
        pc.size()?
            .expect("ranked partitions carry a size")
            .resolve(n)
    };
    Ok(match pc {
        PartitionConfig::All => ParameterPartition::all(n),
        PartitionConfig::None => ParameterPartition::none(n),
        PartitionConfig::Layers { layers, parts } => select_by_layer_parts(&p.spec, layers, *parts)?,
        PartitionConfig::TopAbsMap { .. } => select_top_abs_map(need_map()?.theta(), size(pc)?)?,
        PartitionConfig::TopSwagVariance { swag, .. } => {
            let map = need_map()?;
            let prior = PriorSpec {
                rescale: Default::default(),
                ..cfg.prior
            };
            let model = p.model(map.clone(), ParameterPartition::all(n), prior, 1.0)?;
            let swag = partial_bnn::inference::SwagConfig {
                seed: p.seed,
                ..swag.clone()
            };
            let fit = fit_swag(&model, map, &swag)?;
            select_top_variance(&fit.posterior.diag_variance(), size(pc)?)?
        }
    })
}

/// A fitted model that can predict at arbitrary inputs.
pub struct Fitted {
    pub template: Network,
    pub partition: ParameterPartition,
    pub posterior: Option<PosteriorApproximation>,
    pub linearized: bool,
    pub extras: BTreeMap<String, f64>,
}

impl Fitted {
    pub fn point(net: Network) -> Self {
        let n = net.num_params();
        Self {
            template: net,
            partition: ParameterPartition::none(n),
            posterior: None,
            linearized: false,
            extras: BTreeMap::new(),
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, cfg: &ExperimentConfig, p: &Prepared) -> Result<PredictiveResult> {
        let task = p.data.task();
        let noise = p.noise_variance();
        Ok(match &self.posterior {
            None => predict_point(&self.template, x, task, noise)?,
            Some(PosteriorApproximation::Laplace(l)) if self.linearized => {
                predict_linearized(&self.template, &self.partition, l, x, task, noise)?
            }
            Some(post) => {
                let n = match (cfg.evaluation.predict_samples, post) {
                    (Some(n), _) => n,
                    (None, PosteriorApproximation::Samples(_)) => 0,
                    (None, _) => DEFAULT_PREDICT_SAMPLES,
                };
                predict(&self.template, &self.partition, post, x, n, task, noise, p.seed)?
            }
        })
    }
}

/// Runs the configured backend over `partition`, starting from `base`.
pub fn fit_backend(cfg: &ExperimentConfig, p: &Prepared, base: &Network, partition: ParameterPartition) -> Result<Fitted> {
    let backend = cfg.backend.seeded(p.seed);
    if let BackendConfig::Map = backend {
        return Ok(Fitted::point(base.clone()));
    }
    let model = p.model(base.clone(), partition.clone(), cfg.prior, cfg.temperature)?;
    let mut extras = BTreeMap::new();
    let mut linearized = false;
    let (template, posterior) = match &backend {
        BackendConfig::Map => unreachable!(),
        BackendConfig::Hmc(h) => {
            let set = run_hmc(&model, &model.initial_point(), h)?;
            for w in &set.warnings {
                log::warn!("seed {}: {w}", p.seed);
            }
            let chains = set.chains.len().max(1) as f64;
            extras.insert("accept_rate".into(), set.chains.iter().map(|c| c.accept_rate).sum::<f64>() / chains);
            extras.insert("step_size".into(), set.chains.iter().map(|c| c.step_size).sum::<f64>() / chains);
            extras.insert(
                "divergences".into(),
                set.chains.iter().map(|c| c.divergences as f64).sum::<f64>(),
            );
            (base.clone(), PosteriorApproximation::Samples(set))
        }
        BackendConfig::Mfvi(m) => {
            let out = train_mfvi(&model, p.validation().as_ref(), m)?;
            extras.insert("best_epoch".into(), out.best_epoch as f64);
            (out.network, PosteriorApproximation::MeanField(out.posterior))
        }
        BackendConfig::Laplace(l) => {
            let mut post = fit_laplace(&model, base, l)?;
            if l.tune_prior_precision {
                let val = p
                    .validation()
                    .ok_or_else(|| CliError::Invalid("prior precision tuning needs a validation split".into()))?;
                let stochastic = partition.stochastic_indices();
                let alpha = tune_prior_precision(&post, base, &stochastic, &p.likelihood, &val, &prior_precision_grid())?;
                post = post.with_prior_precision(alpha);
            }
            extras.insert("prior_precision".into(), post.prior_precision);
            linearized = l.predictive == PredictiveMode::Linearized;
            (laplace_template(base, &partition, &post)?, PosteriorApproximation::Laplace(post))
        }
        BackendConfig::Swag(s) => {
            let out = fit_swag(&model, base, s)?;
            extras.insert("swag_rank".into(), out.posterior.rank() as f64);
            (out.network, PosteriorApproximation::Swag(out.posterior))
        }
    };
    Ok(Fitted {
        template,
        partition,
        posterior: Some(posterior),
        linearized,
        extras,
    })
}

fn laplace_template(base: &Network, partition: &ParameterPartition, post: &LaplacePosterior) -> Result<Network> {
    let mut theta = base.theta().to_vec();
    partition.scatter(&mut theta, &post.theta_map_s)?;
    Ok(base.with_theta(theta)?)
}

/// Evaluates `fitted` on the test split and, for 1D regression, on the grid
/// and the sine regions.
pub fn evaluate(
    cfg: &ExperimentConfig,
    p: &Prepared,
    fitted: &Fitted,
    stage: Stage,
    out: &mut SeedOutput,
) -> Result<()> {
    let test = p.data.test();
    if test.is_empty() {
        return Err(CliError::Invalid("the test split is empty".into()));
    }
    let pred = fitted.predict(test.x.view(), cfg, p)?;
    let metrics = MetricsReport::compute(&pred, test.y.view())?;
    let mut extras = fitted.extras.clone();
    let one_d = p.data.input_dim() == 1 && p.data.output_dim() == 1 && p.data.task() == Task::Regression;
    let k = fitted.partition.num_stochastic();
    if one_d {
        if let Some(sine) = &p.sine {
            extras.extend(sine_region_stats(cfg, p, fitted, sine)?);
        }
        let (lo, hi, points) = match &cfg.evaluation.grid {
            Some(g) => (g.lo, g.hi, g.points),
            None => {
                let raw = p.data.raw_x().column(0);
                let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo - 0.5, hi + 0.5, DEFAULT_GRID_POINTS)
            }
        };
        let raw_grid = data::linspace_column(lo, hi, points);
        let g = fitted.predict(p.data.normalize_x(&raw_grid).view(), cfg, p)?;
        let (mean, std) = denormalized_moments(p, &g);
        out.curves.push(GridCurve {
            seed: p.seed,
            stage,
            k,
            x: raw_grid.column(0).to_vec(),
            mean,
            std,
        });
    }
    out.records.push(RunRecord {
        seed: p.seed,
        stage,
        backend: match stage {
            Stage::Map => "map".into(),
            Stage::Posterior => cfg.backend.name().into(),
        },
        partition: match stage {
            Stage::Map => "none".into(),
            Stage::Posterior => cfg.partition.label().into(),
        },
        k,
        num_params: p.num_params(),
        metrics,
        extras,
    });
    Ok(())
}

/// Mean and std of the first output in raw target units.
fn denormalized_moments(p: &Prepared, pred: &PredictiveResult) -> (Vec<f64>, Vec<f64>) {
    let (shift, scale) = p.data.y_stats().map_or((0.0, 1.0), |s| (s.mean[0], s.std[0]));
    let std = pred.std().unwrap_or_else(|| vec![0.0; pred.len()]);
    (
        pred.mean.column(0).iter().map(|m| m * scale + shift).collect(),
        std.iter().map(|s| s * scale).collect(),
    )
}

const REGION_POINTS: usize = 200;

/// Mean predictive std inside the data regions and inside the gap, and the
/// RMSE of the predictive mean against the noise-free target within the
/// data regions.
fn sine_region_stats(
    cfg: &ExperimentConfig,
    p: &Prepared,
    fitted: &Fitted,
    sine: &SineConfig,
) -> Result<BTreeMap<String, f64>> {
    let std_and_err = |lo: f64, hi: f64, interior: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let x = if interior {
            // Open interval: drop both endpoints.
            let g = data::linspace_column(lo, hi, REGION_POINTS + 2);
            g.slice(ndarray::s![1..REGION_POINTS + 1, ..]).to_owned()
        } else {
            data::linspace_column(lo, hi, REGION_POINTS)
        };
        let pred = fitted.predict(p.data.normalize_x(&x).view(), cfg, p)?;
        let (mean, std) = denormalized_moments(p, &pred);
        let err = x.column(0).iter().zip(&mean).map(|(x, m)| m - data::sine_target(*x)).collect();
        Ok((std, err))
    };
    let mut data_std = Vec::new();
    let mut data_err = Vec::new();
    for &(lo, hi, _) in &sine.regions {
        let (s, e) = std_and_err(lo, hi, false)?;
        data_std.extend(s);
        data_err.extend(e);
    }
    let (gap_lo, gap_hi) = sine.gap();
    let (gap_std, _) = std_and_err(gap_lo, gap_hi, true)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut m = BTreeMap::new();
    m.insert("data_std".into(), mean(&data_std));
    m.insert("gap_std".into(), mean(&gap_std));
    m.insert(
        "data_rmse".into(),
        mean(&data_err.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
    );
    Ok(m)
}

/// Per-chain test-set class probabilities, `[samples x points x classes]`.
fn chain_probabilities(fitted: &Fitted, x: ArrayView2<'_, f64>) -> Result<Vec<Array3<f64>>> {
    let Some(PosteriorApproximation::Samples(set)) = &fitted.posterior else {
        return Ok(Vec::new());
    };
    let stochastic = fitted.partition.stochastic_indices();
    set.chains
        .iter()
        .map(|c| {
            let draws: Vec<_> = c.samples.iter().map(|s| (s.clone(), None)).collect();
            let outs = draw_outputs(&fitted.template, &stochastic, &draws, x)?;
            let (n, classes) = outs.first().map_or((0, 0), Array2::dim);
            let mut t = Array3::zeros((outs.len(), n, classes));
            for (s, o) in outs.iter().enumerate() {
                for (i, row) in o.rows().into_iter().enumerate() {
                    for (j, v) in softmax(&row.to_vec()).into_iter().enumerate() {
                        t[[s, i, j]] = v;
                    }
                }
            }
            Ok(t)
        })
        .collect()
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn persist(cfg: &ExperimentConfig, p: &Prepared, fitted: &Fitted, dir: &Path) -> Result<()> {
    if !(cfg.save_posterior || cfg.save_chain_predictions) {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    if cfg.save_posterior {
        if let Some(post) = &fitted.posterior {
            post.save(&dir.join("posterior"))?;
        }
        write_json(&dir.join("partition.json"), &fitted.partition.to_json())?;
        fitted.template.save(&dir.join("template"))?;
    }
    if cfg.save_chain_predictions && matches!(p.data.task(), Task::Classification { .. }) {
        let test = p.data.test();
        for (i, t) in chain_probabilities(fitted, test.x.view())?.iter().enumerate() {
            write_chain_blob(&dir.join(format!("chain_{i}.bin")), t)?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One seed of `run`: MAP when required, then the backend over the
/// configured partition (or each sweep size).
pub fn run_seed(loaded: &LoadedConfig, seed: u64, out_dir: &Path) -> Result<SeedOutput> {
    let cfg = &loaded.config;
    let p = Prepared::new(loaded, seed)?;
    let map = if cfg.backend.needs_map() || cfg.partition.needs_map() {
        Some(train_stage_one(cfg, &p)?)
    } else {
        None
    };
    let base = match &map {
        Some(m) => m.clone(),
        None => p.init_network()?,
    };
    let partitions: Vec<PartitionConfig> = match &cfg.sweep {
        Some(s) => s.sizes()?.into_iter().map(|z| cfg.partition.with_size(z)).collect::<Result<_>>()?,
        None => vec![cfg.partition.clone()],
    };
    let stage = match cfg.backend {
        BackendConfig::Map => Stage::Map,
        _ => Stage::Posterior,
    };
    let mut out = SeedOutput::default();
    for (i, pc) in partitions.iter().enumerate() {
        let partition = resolve_partition(cfg, pc, &p, map.as_ref())?;
        log::info!("seed {seed}: {} over {} of {} parameters", cfg.backend.name(), partition.num_stochastic(), p.num_params());
        let fitted = fit_backend(cfg, &p, &base, partition)?;
        evaluate(cfg, &p, &fitted, stage, &mut out)?;
        let dir = if partitions.len() > 1 {
            seed_dir(out_dir, seed).join(format!("k_{i}"))
        } else {
            seed_dir(out_dir, seed)
        };
        persist(cfg, &p, &fitted, &dir)?;
    }
    Ok(out)
}

pub fn stage_one_dir(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join("stage1")
}

/// Trains the MAP network, derives the partition from it and persists both.
pub fn two_stage_first(loaded: &LoadedConfig, seed: u64, out_dir: &Path) -> Result<SeedOutput> {
    let cfg = &loaded.config;
    let p = Prepared::new(loaded, seed)?;
    let map = train_stage_one(cfg, &p)?;
    let partition = resolve_partition(cfg, &cfg.partition, &p, Some(&map))?;
    let dir = stage_one_dir(out_dir, seed);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    map.save(&dir.join("map"))?;
    write_json(&dir.join("partition.json"), &partition.to_json())?;
    let mut out = SeedOutput::default();
    evaluate(cfg, &p, &Fitted::point(map), Stage::Map, &mut out)?;
    Ok(out)
}

/// Loads the stage-one artifacts and runs the backend over the stored
/// partition. The MAP metrics are recomputed from the checkpoint.
pub fn two_stage_second(loaded: &LoadedConfig, seed: u64, out_dir: &Path) -> Result<SeedOutput> {
    let cfg = &loaded.config;
    let p = Prepared::new(loaded, seed)?;
    let dir = stage_one_dir(out_dir, seed);
    for f in ["map.json", "map.bin", "partition.json"] {
        if !dir.join(f).is_file() {
            return Err(CliError::MissingArtifact(dir.join(f)));
        }
    }
    let map = Network::load(&dir.join("map"))?;
    if map.spec() != &p.spec {
        return Err(CliError::Invalid(format!(
            "stage-1 checkpoint in {} has a different architecture",
            dir.display()
        )));
    }
    let pj: PartitionJson = read_json(&dir.join("partition.json"))?;
    let partition = ParameterPartition::from_json(&pj)?;
    let mut out = SeedOutput::default();
    evaluate(cfg, &p, &Fitted::point(map.clone()), Stage::Map, &mut out)?;
    let fitted = fit_backend(cfg, &p, &map, partition)?;
    evaluate(cfg, &p, &fitted, Stage::Posterior, &mut out)?;
    persist(cfg, &p, &fitted, &seed_dir(out_dir, seed))?;
    Ok(out)
}

/// Runs `f` for every seed on the current rayon pool, keeping seed order.
pub fn for_seeds<F>(seeds: &[u64], f: F) -> Result<SeedOutput>
where
    F: Fn(u64) -> Result<SeedOutput> + Sync,
{
    let parts: Vec<Result<SeedOutput>> = seeds.par_iter().map(|&s| f(s)).collect();
    let mut all = SeedOutput::default();
    for part in parts {
        let part = part?;
        all.records.extend(part.records);
        all.curves.extend(part.curves);
    }
    Ok(all)
}

