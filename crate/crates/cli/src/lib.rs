//! Config-driven experiment runner for partially stochastic networks.
//!
//! Each subcommand of the `partial-bnn` binary is a function here so that
//! tests can drive it without spawning processes.

pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

use std::path::{Path, PathBuf};

use partial_bnn::diagnostics::{diagnose, read_chain_blob, DiagnosticsReport};
use partial_bnn::ucda::{build_constructive_with, verify_recovery, ConstructiveOptions, RecoveryCertificate, UcdaTag};

pub use config::{ExperimentConfig, LoadedConfig};
pub use error::{CliError, Result};
pub use pipeline::{RunRecord, SeedOutput, Stage};

/// Overrides shared by the experiment subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunOptions {
    fn resolve(&self, loaded: &LoadedConfig) -> (Vec<u64>, PathBuf) {
        let seeds = match self.seed {
            Some(s) => vec![s],
            None => loaded.config.seeds.clone(),
        };
        let out = self.out.clone().unwrap_or_else(|| loaded.config.output_dir.clone());
        (seeds, out)
    }
}

/// `run`: the configured experiment for every seed (and every sweep size
/// when the config has a `sweep` section).
pub fn run(loaded: &LoadedConfig, opts: &RunOptions) -> Result<SeedOutput> {
    let (seeds, out) = opts.resolve(loaded);
    let result = pipeline::for_seeds(&seeds, |s| pipeline::run_seed(loaded, s, &out))?;
    output::write_outputs(&out, loaded, "run", &seeds, &result)?;
    Ok(result)
}

/// `sweep`: like `run`, but requires a `sweep` section.
pub fn sweep(loaded: &LoadedConfig, opts: &RunOptions) -> Result<SeedOutput> {
    if loaded.config.sweep.is_none() {
        return Err(CliError::Schema {
            path: "sweep".into(),
            message: "the sweep command needs a [sweep] section".into(),
        });
    }
    let (seeds, out) = opts.resolve(loaded);
    let result = pipeline::for_seeds(&seeds, |s| pipeline::run_seed(loaded, s, &out))?;
    output::write_outputs(&out, loaded, "sweep", &seeds, &result)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageSelection {
    First,
    Second,
    #[default]
    Both,
}

/// `two-stage`: MAP, partition from the MAP network, then the backend. The
/// checkpoint and partition are written under `seed_<s>/stage1/` and read
/// back by the second stage.
pub fn two_stage(loaded: &LoadedConfig, opts: &RunOptions, stages: StageSelection) -> Result<SeedOutput> {
    if loaded.config.sweep.is_some() {
        return Err(CliError::Schema {
            path: "sweep".into(),
            message: "two-stage runs a single partition; use the sweep command".into(),
        });
    }
    if matches!(loaded.config.backend, config::BackendConfig::Map) {
        return Err(CliError::Schema {
            path: "backend".into(),
            message: "two-stage needs a posterior backend for stage 2".into(),
        });
    }
    let (seeds, out) = opts.resolve(loaded);
    let result = pipeline::for_seeds(&seeds, |s| match stages {
        StageSelection::First => pipeline::two_stage_first(loaded, s, &out),
        StageSelection::Second => pipeline::two_stage_second(loaded, s, &out),
        StageSelection::Both => {
            pipeline::two_stage_first(loaded, s, &out)?;
            pipeline::two_stage_second(loaded, s, &out)
        }
    })?;
    output::write_outputs(&out, loaded, "two-stage", &seeds, &result)?;
    Ok(result)
}

/// `diagnose`: chain agreement over stored per-chain prediction blobs.
pub fn diagnose_chains(paths: &[PathBuf], labels: Option<&[usize]>, seed: u64) -> Result<DiagnosticsReport> {
    let chains = paths
        .iter()
        .map(|p| read_chain_blob(p))
        .collect::<partial_bnn::Result<Vec<_>>>()?;
    Ok(diagnose(&chains, labels, seed)?)
}

/// Reads integer class labels, one per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .map_err(|_| CliError::Invalid(format!("label `{l}` in {} is not a class index", path.display())))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CertRequest {
    pub tag: UcdaTag,
    pub d: usize,
    pub m: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub trials: usize,
    pub lambdas: Vec<f64>,
    pub input_box: (f64, f64),
    pub seed: u64,
}

/// `ucda-cert`: one recovery certificate per radius.
pub fn ucda_cert(req: &CertRequest) -> Result<Vec<RecoveryCertificate>> {
    if req.lambdas.is_empty() {
        return Err(CliError::Invalid("at least one lambda is required".into()));
    }
    req.lambdas
        .iter()
        .map(|&lambda| {
            let opts = ConstructiveOptions {
                hidden_layers: req.hidden_layers,
                lambda,
                seed: req.seed,
                ..Default::default()
            };
            let net = build_constructive_with(req.tag, req.d, req.m, req.width, &opts)?;
            Ok(verify_recovery(&net, req.trials, req.input_box, lambda, req.seed)?)
        })
        .collect()
}

/// Caps the global worker pool at `PARTIAL_BNN_THREADS` when set.
pub fn init_thread_pool(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Invalid("PARTIAL_BNN_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    Ok(())
}
