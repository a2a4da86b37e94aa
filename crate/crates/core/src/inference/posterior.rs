//! A tagged union over the posterior approximations, with persistence as a
//! JSON header plus a flat binary blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hmc::{Chain, SampleSet};
use super::laplace::{Curvature, LaplacePosterior};
use super::mfvi::MeanFieldGaussian;
use super::swag::SwagPosterior;
use crate::blob;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorApproximation {
    Samples(SampleSet),
    MeanField(MeanFieldGaussian),
    Laplace(LaplacePosterior),
    Swag(SwagPosterior),
}

/// One draw of the stochastic parameters, with the noise precision when
/// the posterior carries it.
pub type Draw = (Vec<f64>, Option<f64>);

#[derive(Debug, Serialize, Deserialize)]
struct ChainHeader {
    id: usize,
    samples: usize,
    warmup_discarded: usize,
    step_size: f64,
    accept_rate: f64,
    divergences: usize,
    noise_precision: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    SampleSet {
        dim: usize,
        chains: Vec<ChainHeader>,
        warnings: Vec<String>,
    },
    MeanField {
        dim: usize,
    },
    Laplace {
        dim: usize,
        dense: bool,
        prior_precision: f64,
        prior_mean: f64,
        noise_precision: Option<f64>,
    },
    Swag {
        dim: usize,
        rank: usize,
        max_rank: usize,
        num_snapshots: usize,
        rank_deficient: bool,
    },
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

impl PosteriorApproximation {
    pub fn kind(&self) -> &'static str {
        match self {
            PosteriorApproximation::Samples(_) => "sample_set",
            PosteriorApproximation::MeanField(_) => "mean_field",
            PosteriorApproximation::Laplace(_) => "laplace",
            PosteriorApproximation::Swag(_) => "swag",
        }
    }

    /// Dimension of the stochastic subset it is defined on.
    pub fn dim(&self) -> usize {
        match self {
            PosteriorApproximation::Samples(s) => s.dim(),
            PosteriorApproximation::MeanField(q) => q.len(),
            PosteriorApproximation::Laplace(l) => l.dim(),
            PosteriorApproximation::Swag(s) => s.dim(),
        }
    }

    /// Draws for Monte Carlo prediction. Sample sets return every stored
    /// draw when `n == 0`, otherwise `n` evenly spaced ones.
    pub fn draws(&self, n: usize, rng: &mut Rng) -> Result<Vec<Draw>> {
        match self {
            PosteriorApproximation::Samples(s) => {
                let all = s.draws();
                if all.is_empty() {
                    return Err(Error::EmptyData("sample set"));
                }
                let pick: Vec<usize> = if n == 0 || n >= all.len() {
                    (0..all.len()).collect()
                } else {
                    (0..n).map(|i| i * all.len() / n).collect()
                };
                Ok(pick.into_iter().map(|i| (all[i].0.to_vec(), all[i].1)).collect())
            }
            PosteriorApproximation::MeanField(q) => Ok((0..n.max(1)).map(|_| (q.sample(rng), None)).collect()),
            PosteriorApproximation::Laplace(l) => (0..n.max(1)).map(|_| Ok((l.sample(rng)?, None))).collect(),
            PosteriorApproximation::Swag(s) => Ok((0..n.max(1)).map(|_| (s.sample(rng), None)).collect()),
        }
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (header, data) = match self {
            PosteriorApproximation::Samples(s) => {
                let dim = s.dim();
                let chains = s
                    .chains
                    .iter()
                    .map(|c| ChainHeader {
                        id: c.id,
                        samples: c.samples.len(),
                        warmup_discarded: c.warmup_discarded,
                        step_size: c.step_size,
                        accept_rate: c.accept_rate,
                        divergences: c.divergences,
                        noise_precision: c.noise_precision.clone(),
                    })
                    .collect();
                let data: Vec<f64> = s.iter().flatten().copied().collect();
                (
                    Header::SampleSet {
                        dim,
                        chains,
                        warnings: s.warnings.clone(),
                    },
                    data,
                )
            }
            PosteriorApproximation::MeanField(q) => {
                let mut data = q.mu.clone();
                data.extend_from_slice(&q.rho);
                (Header::MeanField { dim: q.len() }, data)
            }
            PosteriorApproximation::Laplace(l) => {
                let mut data = l.theta_map_s.clone();
                let dense = match &l.curvature {
                    Curvature::Diagonal { values } => {
                        data.extend_from_slice(values);
                        false
                    }
                    Curvature::Dense { values, .. } => {
                        data.extend_from_slice(values);
                        true
                    }
                };
                (
                    Header::Laplace {
                        dim: l.dim(),
                        dense,
                        prior_precision: l.prior_precision,
                        prior_mean: l.prior_mean,
                        noise_precision: l.noise_precision,
                    },
                    data,
                )
            }
            PosteriorApproximation::Swag(s) => {
                let mut data = s.swa_mean.clone();
                data.extend_from_slice(&s.diag_second_moment);
                for d in &s.deviations {
                    data.extend_from_slice(d);
                }
                (
                    Header::Swag {
                        dim: s.dim(),
                        rank: s.rank(),
                        max_rank: s.max_rank,
                        num_snapshots: s.num_snapshots,
                        rank_deficient: s.rank_deficient,
                    },
                    data,
                )
            }
        };
        std::fs::write(with_ext(stem, ".json"), serde_json::to_string_pretty(&header)?)?;
        blob::write_f64(&with_ext(stem, ".bin"), &data)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: Header = serde_json::from_str(&std::fs::read_to_string(with_ext(stem, ".json"))?)?;
        let bin = with_ext(stem, ".bin");
        let data = blob::read_f64(&bin)?;
        let check = |expected: usize| -> Result<()> {
            if data.len() == expected {
                Ok(())
            } else {
                Err(Error::MalformedBlob {
                    path: bin.clone(),
                    reason: format!("expected {expected} values, found {}", data.len()),
                })
            }
        };
        Ok(match header {
            Header::SampleSet { dim, chains, warnings } => {
                let total: usize = chains.iter().map(|c| c.samples).sum();
                check(total * dim)?;
                let mut rows = data.chunks(dim.max(1));
                let chains = chains
                    .into_iter()
                    .map(|c| Chain {
                        id: c.id,
                        samples: (0..c.samples)
                            .map(|_| rows.next().map(<[f64]>::to_vec).unwrap_or_default())
                            .collect(),
                        noise_precision: c.noise_precision,
                        warmup_discarded: c.warmup_discarded,
                        step_size: c.step_size,
                        accept_rate: c.accept_rate,
                        divergences: c.divergences,
                    })
                    .collect();
                PosteriorApproximation::Samples(SampleSet { chains, warnings })
            }
            Header::MeanField { dim } => {
                check(2 * dim)?;
                PosteriorApproximation::MeanField(MeanFieldGaussian::new(data[..dim].to_vec(), data[dim..].to_vec())?)
            }
            Header::Laplace {
                dim,
                dense,
                prior_precision,
                prior_mean,
                noise_precision,
            } => {
                let curv_len = if dense { dim * dim } else { dim };
                check(dim + curv_len)?;
                let values = data[dim..].to_vec();
                let curvature = if dense {
                    Curvature::Dense { dim, values }
                } else {
                    Curvature::Diagonal { values }
                };
                PosteriorApproximation::Laplace(LaplacePosterior {
                    theta_map_s: data[..dim].to_vec(),
                    curvature,
                    prior_precision,
                    prior_mean,
                    noise_precision,
                })
            }
            Header::Swag {
                dim,
                rank,
                max_rank,
                num_snapshots,
                rank_deficient,
            } => {
                check(dim * (2 + rank))?;
                PosteriorApproximation::Swag(SwagPosterior {
                    swa_mean: data[..dim].to_vec(),
                    diag_second_moment: data[dim..2 * dim].to_vec(),
                    deviations: data[2 * dim..].chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
                    max_rank,
                    num_snapshots,
                    rank_deficient,
                })
            }
        })
    }
}
