//! Function-space mixing diagnostics for multi-chain posteriors.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::predictive::argmax;
use crate::rng::{stream_rng, streams};

/// Averaged predictive of each chain, `[n_points x n_classes]` per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPredictions {
    chains: Vec<Array2<f64>>,
    ids: Vec<usize>,
}

impl ChainPredictions {
    pub fn new(chains: Vec<Array2<f64>>) -> Result<Self> {
        let ids = (0..chains.len()).collect();
        Self::with_ids(chains, ids)
    }

    pub fn with_ids(chains: Vec<Array2<f64>>, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != chains.len() {
            return Err(Error::dims("chain ids", chains.len(), ids.len()));
        }
        if let Some(first) = chains.first() {
            for c in &chains[1..] {
                if c.dim() != first.dim() {
                    return Err(Error::dims("chain prediction size", first.len(), c.len()));
                }
            }
        }
        Ok(Self { chains, ids })
    }

    /// Averages per-sample probability tensors `[n_samples x n_points x
    /// n_classes]` within each chain.
    pub fn from_samples(chains: &[Array3<f64>]) -> Result<Self> {
        let avg = chains
            .iter()
            .map(|c| c.mean_axis(Axis(0)).ok_or(Error::EmptyData("chain without samples")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(avg)
    }

    pub fn chains(&self) -> &[Array2<f64>] {
        &self.chains
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn num_points(&self) -> usize {
        self.chains.first().map_or(0, Array2::nrows)
    }

    fn predicted_classes(&self) -> Vec<Vec<usize>> {
        self.chains
            .iter()
            .map(|c| c.rows().into_iter().map(|r| argmax(&r.to_vec())).collect())
            .collect()
    }
}

/// Fraction of points on which every chain's averaged predictive has the
/// same argmax class.
pub fn all_chains_agreement(cp: &ChainPredictions) -> Result<f64> {
    if cp.num_chains() < 2 {
        return Err(Error::TooFewChains(cp.num_chains()));
    }
    let n = cp.num_points();
    if n == 0 {
        return Err(Error::EmptyData("chain predictions"));
    }
    let classes = cp.predicted_classes();
    let agree = (0..n).filter(|&i| classes.iter().all(|c| c[i] == classes[0][i])).count();
    Ok(agree as f64 / n as f64)
}

/// Sample indices for each pseudo-chain, drawn with replacement.
pub fn bootstrap_indices(n_samples: usize, n_pseudo: usize, per_pseudo: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, streams::BOOTSTRAP);
    (0..n_pseudo)
        .map(|_| (0..per_pseudo).map(|_| rng.random_range(0..n_samples)).collect())
        .collect()
}

/// Agreement among pseudo-chains built by resampling one chain's samples.
pub fn bootstrap_agreement_with(samples: &Array3<f64>, indices: &[Vec<usize>]) -> Result<f64> {
    let pseudo = indices
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return Err(Error::EmptyData("pseudo-chain"));
            }
            let mut acc = Array2::zeros((samples.dim().1, samples.dim().2));
            for &i in idx {
                acc += &samples.index_axis(Axis(0), i);
            }
            Ok(acc / idx.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    all_chains_agreement(&ChainPredictions::new(pseudo)?)
}

pub const DEFAULT_PSEUDO_CHAINS: usize = 3;

/// Bootstrap baseline for [`all_chains_agreement`]: `n_pseudo` pseudo-chains
/// of `per_pseudo` samples each (the full chain length when `None`).
pub fn bootstrap_agreement(samples: &Array3<f64>, n_pseudo: usize, per_pseudo: Option<usize>, seed: u64) -> Result<f64> {
    let n = samples.dim().0;
    if n == 0 {
        return Err(Error::EmptyData("chain without samples"));
    }
    let idx = bootstrap_indices(n, n_pseudo, per_pseudo.unwrap_or(n), seed);
    bootstrap_agreement_with(samples, &idx)
}

/// Accuracy of each chain's averaged predictive.
pub fn per_chain_accuracy(cp: &ChainPredictions, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != cp.num_points() {
        return Err(Error::dims("labels", cp.num_points(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("labels"));
    }
    Ok(cp
        .predicted_classes()
        .iter()
        .map(|c| c.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub agreement: f64,
    pub bootstrap_agreement: Option<f64>,
    pub per_chain_accuracy: Option<Vec<f64>>,
}

/// Reads one chain blob: either `[n_samples x n_points x n_classes]` or an
/// already averaged `[n_points x n_classes]` (a single sample).
pub fn read_chain_blob(path: &Path) -> Result<Array3<f64>> {
    let (shape, data) = blob::read_tensor(path)?;
    let shape3 = match shape.as_slice() {
        [s, p, c] => (*s, *p, *c),
        [p, c] => (1, *p, *c),
        _ => {
            return Err(Error::MalformedBlob {
                path: path.to_path_buf(),
                reason: format!("expected 2 or 3 dimensions, found {}", shape.len()),
            })
        }
    };
    Array3::from_shape_vec(shape3, data).map_err(|e| Error::MalformedBlob {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_chain_blob(path: &Path, samples: &Array3<f64>) -> Result<()> {
    let (s, p, c) = samples.dim();
    let data: Vec<f64> = samples.iter().copied().collect();
    blob::write_tensor(path, &[s, p, c], &data)
}

/// Full report over per-chain sample tensors. The bootstrap baseline
/// resamples the first chain.
pub fn diagnose(chains: &[Array3<f64>], labels: Option<&[usize]>, seed: u64) -> Result<DiagnosticsReport> {
    let cp = ChainPredictions::from_samples(chains)?;
    let agreement = all_chains_agreement(&cp)?;
    let bootstrap_agreement = match chains.first() {
        Some(c) if c.dim().0 >= 2 => Some(bootstrap_agreement(c, DEFAULT_PSEUDO_CHAINS, None, seed)?),
        _ => None,
    };
    let per_chain_accuracy = labels.map(|l| per_chain_accuracy(&cp, l)).transpose()?;
    Ok(DiagnosticsReport {
        agreement,
        bootstrap_agreement,
        per_chain_accuracy,
    })
}
