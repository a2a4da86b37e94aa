//! Result files: `metrics.csv`, `predictive.csv`, `results.json` and
//! `manifest.json`. All writes happen after every seed has finished, in
//! seed order.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{LoadedConfig, Metric};
use crate::error::{CliError, Result};
use crate::pipeline::{write_json, GridCurve, RunRecord, SeedOutput};

pub const LIBRARY: &str = "partial-bnn";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub fn metrics_header(metrics: &[Metric]) -> String {
    let mut cols = vec!["seed", "stage", "backend", "partition", "k", "num_params"];
    for m in metrics {
        match m {
            Metric::Nll => cols.push("nll"),
            Metric::Rmse => cols.push("rmse"),
            Metric::Accuracy => cols.push("accuracy"),
            Metric::Ece => cols.push("ece"),
            Metric::Coverage => cols.extend(["coverage_1sigma", "coverage_2sigma", "coverage_3sigma"]),
        }
    }
    cols.join(",")
}

pub fn metrics_row(r: &RunRecord, metrics: &[Metric]) -> String {
    let mut cells = vec![
        r.seed.to_string(),
        r.stage.as_str().to_owned(),
        r.backend.clone(),
        r.partition.clone(),
        r.k.to_string(),
        r.num_params.to_string(),
    ];
    let cov = |k: &str| num(r.metrics.interval_coverage.get(k).copied());
    for m in metrics {
        match m {
            Metric::Nll => cells.push(num(Some(r.metrics.nll))),
            Metric::Rmse => cells.push(num(r.metrics.rmse)),
            Metric::Accuracy => cells.push(num(r.metrics.accuracy)),
            Metric::Ece => cells.push(num(r.metrics.ece)),
            Metric::Coverage => cells.extend([cov("1sigma"), cov("2sigma"), cov("3sigma")]),
        }
    }
    cells.join(",")
}

pub fn metrics_csv(records: &[RunRecord], metrics: &[Metric]) -> String {
    let mut s = metrics_header(metrics);
    s.push('\n');
    for r in records {
        s.push_str(&metrics_row(r, metrics));
        s.push('\n');
    }
    s
}

/// Long format: one row per grid point, with bounds at 1, 2 and 3 std.
pub fn predictive_csv(curves: &[GridCurve]) -> String {
    let mut s = String::from("seed,stage,k,x,mean,std,lower_1sigma,upper_1sigma,lower_2sigma,upper_2sigma,lower_3sigma,upper_3sigma\n");
    for c in curves {
        for ((x, m), sd) in c.x.iter().zip(&c.mean).zip(&c.std) {
            let _ = write!(s, "{},{},{},{x:.16e},{m:.16e},{sd:.16e}", c.seed, c.stage.as_str(), c.k);
            for n in [1.0, 2.0, 3.0] {
                let _ = write!(s, ",{:.16e},{:.16e}", m - n * sd, m + n * sd);
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Serialize)]
struct Results<'a> {
    name: Option<&'a str>,
    config_sha256: String,
    records: &'a [RunRecord],
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    library: &'a str,
    version: &'a str,
    command: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    files: Vec<&'a str>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes every result file for one invocation into `out`.
pub fn write_outputs(out: &Path, loaded: &LoadedConfig, command: &str, seeds: &[u64], result: &SeedOutput) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let hash = loaded.hash();
    let mut files = vec!["metrics.csv", "results.json", "manifest.json"];
    write_text(&out.join("metrics.csv"), &metrics_csv(&result.records, &loaded.config.metrics))?;
    if !result.curves.is_empty() {
        write_text(&out.join("predictive.csv"), &predictive_csv(&result.curves))?;
        files.push("predictive.csv");
    }
    write_json(
        &out.join("results.json"),
        &Results {
            name: loaded.config.name.as_deref(),
            config_sha256: hash.clone(),
            records: &result.records,
        },
    )?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            library: LIBRARY,
            version: VERSION,
            command,
            config_sha256: hash,
            seeds,
            files,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Stage;
    use partial_bnn::MetricsReport;
    use std::collections::BTreeMap;

    fn record() -> RunRecord {
        RunRecord {
            seed: 3,
            stage: Stage::Posterior,
            backend: "hmc".into(),
            partition: "top_abs_map".into(),
            k: 7,
            num_params: 10,
            metrics: MetricsReport {
                nll: 0.1,
                rmse: Some(1.0 / 3.0),
                accuracy: None,
                ece: None,
                interval_coverage: [("1sigma", 0.5), ("2sigma", 0.75), ("3sigma", 1.0)]
                    .into_iter()
                    .map(|(k, v)| (k.to_owned(), v))
                    .collect(),
            },
            extras: BTreeMap::new(),
        }
    }

    #[test]
    fn row_has_full_precision_and_empty_cells() {
        let row = metrics_row(&record(), &Metric::all());
        assert_eq!(
            row,
            "3,posterior,hmc,top_abs_map,7,10,1.0000000000000001e-1,3.3333333333333331e-1,,,\
             5.0000000000000000e-1,7.5000000000000000e-1,1.0000000000000000e0"
        );
        let v: f64 = row.split(',').nth(7).unwrap().parse().unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }

    #[test]
    fn selected_metrics_only() {
        assert_eq!(metrics_header(&[Metric::Nll]), "seed,stage,backend,partition,k,num_params,nll");
        assert_eq!(metrics_row(&record(), &[Metric::Rmse]).split(',').count(), 7);
    }

    #[test]
    fn predictive_bounds() {
        let c = GridCurve {
            seed: 0,
            stage: Stage::Map,
            k: 0,
            x: vec![0.0],
            mean: vec![1.0],
            std: vec![0.5],
        };
        let csv = predictive_csv(&[c]);
        let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![0.0, 1.0, 0.5, 0.5, 1.5, 0.0, 2.0, -0.5, 2.5]);
    }
}
