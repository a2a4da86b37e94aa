//! Datasets: synthetic generators, CSV ingestion, normalization and splits.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-12;

    /// Column means and (n-1) standard deviations of `rows`.
    pub fn fit(data: &Array2<f64>, rows: &[usize]) -> Self {
        let d = data.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        if rows.is_empty() {
            return Self { mean, std };
        }
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        if rows.len() > 1 {
            let mut ss = vec![0.0; d];
            for &r in rows {
                for (j, v) in data.row(r).iter().enumerate() {
                    ss[j] += (v - mean[j]).powi(2);
                }
            }
            for (s, q) in std.iter_mut().zip(ss) {
                *s = (q / (n - 1.0)).sqrt().max(Self::STD_FLOOR);
            }
        }
        Self { mean, std }
    }

    pub fn transform(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn inverse(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Inputs and targets of one split, copied out of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub task: Task,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Class labels for classification subsets (stored as `f64` in column 0).
    pub fn labels(&self) -> Vec<usize> {
        self.y.column(0).iter().map(|&v| v as usize).collect()
    }
}

/// A supervised dataset with split assignment and optional standardization.
///
/// Raw values are kept alongside the working copies so that re-splitting
/// recomputes normalization statistics from the new training rows only.
/// Classification targets are a single column of class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    raw_x: Array2<f64>,
    raw_y: Array2<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
    task: Task,
    splits: Vec<Split>,
    normalize_features: bool,
    normalize_targets: bool,
    x_stats: Option<Standardizer>,
    y_stats: Option<Standardizer>,
}

impl Dataset {
    /// All rows start in the training split.
    pub fn new(x: Array2<f64>, y: Array2<f64>, task: Task) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::dims("target rows", x.nrows(), y.nrows()));
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyData("dataset has no rows"));
        }
        if let Task::Classification { n_classes } = task {
            if y.ncols() != 1 {
                return Err(Error::dims("classification target columns", 1, y.ncols()));
            }
            if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v as usize >= n_classes) {
                return Err(Error::InvalidConfig("labels must be integers in 0..n_classes".into()));
            }
        }
        let n = x.nrows();
        Ok(Self {
            x: x.clone(),
            y: y.clone(),
            raw_x: x,
            raw_y: y,
            task,
            splits: vec![Split::Train; n],
            normalize_features: false,
            normalize_targets: false,
            x_stats: None,
            y_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Regression => self.y.ncols(),
            Task::Classification { n_classes } => n_classes,
        }
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

    pub fn raw_x(&self) -> &Array2<f64> {
        &self.raw_x
    }

    pub fn raw_y(&self) -> &Array2<f64> {
        &self.raw_y
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn x_stats(&self) -> Option<&Standardizer> {
        self.x_stats.as_ref()
    }

    pub fn y_stats(&self) -> Option<&Standardizer> {
        self.y_stats.as_ref()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Subset {
        let idx = self.indices(split);
        Subset {
            x: self.x.select(Axis(0), &idx),
            y: self.y.select(Axis(0), &idx),
            task: self.task,
        }
    }

    pub fn train(&self) -> Subset {
        self.subset(Split::Train)
    }

    pub fn validation(&self) -> Subset {
        self.subset(Split::Validation)
    }

    pub fn test(&self) -> Subset {
        self.subset(Split::Test)
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(Error::dims("split assignment", self.len(), splits.len()));
        }
        self.splits = splits;
        self.refresh_normalization();
        Ok(self)
    }

    /// Enables standardization; statistics come from the training split.
    pub fn normalized(mut self, features: bool, targets: bool) -> Self {
        self.normalize_features = features;
        self.normalize_targets = targets && self.task == Task::Regression;
        self.refresh_normalization();
        self
    }

    fn refresh_normalization(&mut self) {
        let train = self.indices(Split::Train);
        if self.normalize_features {
            let s = Standardizer::fit(&self.raw_x, &train);
            self.x = s.transform(&self.raw_x);
            self.x_stats = Some(s);
        } else {
            self.x = self.raw_x.clone();
            self.x_stats = None;
        }
        if self.normalize_targets {
            let s = Standardizer::fit(&self.raw_y, &train);
            self.y = s.transform(&self.raw_y);
            self.y_stats = Some(s);
        } else {
            self.y = self.raw_y.clone();
            self.y_stats = None;
        }
    }

    /// Maps working-space features back to raw units.
    pub fn denormalize_x(&self, x: &Array2<f64>) -> Array2<f64> {
        match &self.x_stats {
            Some(s) => s.inverse(x),
            None => x.clone(),
        }
    }

    pub fn normalize_x(&self, x: &Array2<f64>) -> Array2<f64> {
        match &self.x_stats {
            Some(s) => s.transform(x),
            None => x.clone(),
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = DatasetMeta {
            task: self.task,
            n: self.len(),
            input_dim: self.raw_x.ncols(),
            target_dim: self.raw_y.ncols(),
            splits: self.splits.clone(),
            normalize_features: self.normalize_features,
            normalize_targets: self.normalize_targets,
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        let x: Vec<f64> = self.raw_x.iter().copied().collect();
        let y: Vec<f64> = self.raw_y.iter().copied().collect();
        blob::write_f64(&stem.with_extension("x.bin"), &x)?;
        blob::write_f64(&stem.with_extension("y.bin"), &y)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let x = blob::read_f64(&stem.with_extension("x.bin"))?;
        let y = blob::read_f64(&stem.with_extension("y.bin"))?;
        let x = Array2::from_shape_vec((meta.n, meta.input_dim), x)
            .map_err(|_| Error::dims("stored features", meta.n * meta.input_dim, 0))?;
        let y = Array2::from_shape_vec((meta.n, meta.target_dim), y)
            .map_err(|_| Error::dims("stored targets", meta.n * meta.target_dim, 0))?;
        Dataset::new(x, y, meta.task)?
            .normalized(meta.normalize_features, meta.normalize_targets)
            .with_splits(meta.splits)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    task: Task,
    n: usize,
    input_dim: usize,
    target_dim: usize,
    splits: Vec<Split>,
    normalize_features: bool,
    normalize_targets: bool,
}

/// The 1D regression target `sin(4 (x - 4.3))`.
pub fn sine_target(x: f64) -> f64 {
    (4.0 * (x - 4.3)).sin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineConfig {
    /// `(low, high, count)` uniform sampling intervals.
    pub regions: Vec<(f64, f64, usize)>,
    pub noise_std: f64,
    pub split_fractions: (f64, f64),
}

impl SineConfig {
    pub const NOISE_STD: f64 = 0.05;

    pub fn small() -> Self {
        Self {
            regions: vec![(-3.0, -1.7, 25), (2.2, 4.0, 25)],
            noise_std: Self::NOISE_STD,
            split_fractions: (0.1, 0.2),
        }
    }

    pub fn large() -> Self {
        Self {
            regions: vec![(-2.0, -1.4, 700), (2.0, 2.8, 700)],
            noise_std: Self::NOISE_STD,
            split_fractions: (0.1, 0.2),
        }
    }

    /// The open interval between the two sampling regions.
    pub fn gap(&self) -> (f64, f64) {
        (self.regions[0].1, self.regions[1].0)
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = stream_rng(seed, streams::DATA);
        let noise = Normal::new(0.0, self.noise_std.max(0.0))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let total: usize = self.regions.iter().map(|r| r.2).sum();
        let mut xs = Vec::with_capacity(total);
        let mut ys = Vec::with_capacity(total);
        for &(lo, hi, n) in &self.regions {
            let u = Uniform::new_inclusive(lo, hi)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            for _ in 0..n {
                let x = rng.sample(u);
                let eps = if self.noise_std > 0.0 { rng.sample(noise) } else { 0.0 };
                xs.push(x);
                ys.push(sine_target(x) + eps);
            }
        }
        let ds = Dataset::new(
            Array2::from_shape_vec((total, 1), xs).expect("shape"),
            Array2::from_shape_vec((total, 1), ys).expect("shape"),
            Task::Regression,
        )?;
        let (test, val) = self.split_fractions;
        make_split(
            &ds,
            &SplitKind::Standard {
                test_fraction: test,
                val_fraction: val,
                seed,
            },
        )
    }
}

/// 50 points: 25 from U(-3, -1.7) and 25 from U(2.2, 4), split 70/20/10.
pub fn gen_sine_small(seed: u64) -> Result<Dataset> {
    SineConfig::small().generate(seed)
}

/// 1400 points: 700 from U(-2, -1.4) and 700 from U(2, 2.8), split 70/20/10.
pub fn gen_sine_large(seed: u64) -> Result<Dataset> {
    SineConfig::large().generate(seed)
}

/// Reads a numeric CSV with a header row. `target_columns` name the
/// regression targets; every other column becomes a feature.
pub fn load_csv(path: &Path, target_columns: &[String], normalize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for t in target_columns {
        let i = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| Error::MissingColumn(t.clone()))?;
        target_idx.push(i);
    }
    if target_idx.is_empty() {
        return Err(Error::InvalidConfig("at least one target column required".into()));
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let parse = |col: usize| -> Result<f64> {
            let cell = &record[col];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell {
                    row,
                    col,
                    value: cell.to_owned(),
                })
        };
        for &c in &feature_idx {
            xs.push(parse(c)?);
        }
        for &c in &target_idx {
            ys.push(parse(c)?);
        }
        rows += 1;
    }
    let x = Array2::from_shape_vec((rows, feature_idx.len()), xs).expect("shape");
    let y = Array2::from_shape_vec((rows, target_idx.len()), ys).expect("shape");
    Ok(Dataset::new(x, y, Task::Regression)?.normalized(normalize, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitKind {
    /// Uniformly random test and validation sets.
    Standard {
        test_fraction: f64,
        #[serde(default)]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Central 10% of the rows ranked by `feature` become the test set;
    /// `val_fraction` of the remainder is carved out at random.
    Gap {
        feature: usize,
        #[serde(default)]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

pub const GAP_FRACTION: f64 = 0.1;

/// Rows (by rank of `feature`, ties by original index) that form the gap
/// test set: `ceil(0.1 n)` rows starting at `floor((n - ceil(0.1 n)) / 2)`.
pub fn gap_test_rows(x: &Array2<f64>, feature: usize) -> Vec<usize> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[[a, feature]].total_cmp(&x[[b, feature]]).then(a.cmp(&b)));
    let n_test = (GAP_FRACTION * n as f64).ceil() as usize;
    let start = (n - n_test) / 2;
    order[start..start + n_test].to_vec()
}

pub fn make_split(ds: &Dataset, kind: &SplitKind) -> Result<Dataset> {
    let n = ds.len();
    let mut splits = vec![Split::Train; n];
    let round = |f: f64| -> Result<usize> {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidConfig(format!("split fraction {f} outside [0, 1)")));
        }
        Ok((f * n as f64).round() as usize)
    };
    match *kind {
        SplitKind::Standard {
            test_fraction,
            val_fraction,
            seed,
        } => {
            let n_test = round(test_fraction)?;
            let n_val = round(val_fraction)?;
            if test_fraction > 0.0 && n_test == 0 {
                return Err(Error::EmptyData("test split would be empty"));
            }
            if val_fraction > 0.0 && n_val == 0 {
                return Err(Error::EmptyData("validation split would be empty"));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(seed, streams::SPLIT));
            for &i in &order[..n_test.min(n)] {
                splits[i] = Split::Test;
            }
            for &i in order.iter().skip(n_test).take(n_val) {
                splits[i] = Split::Validation;
            }
        }
        SplitKind::Gap {
            feature,
            val_fraction,
            seed,
        } => {
            if feature >= ds.input_dim() {
                return Err(Error::InvalidConfig(format!(
                    "gap feature {feature} >= input dimension {}",
                    ds.input_dim()
                )));
            }
            for i in gap_test_rows(ds.raw_x(), feature) {
                splits[i] = Split::Test;
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
            let n_val = (val_fraction * rest.len() as f64).round() as usize;
            rest.shuffle(&mut stream_rng(seed, streams::SPLIT));
            for &i in &rest[..n_val] {
                splits[i] = Split::Validation;
            }
        }
    }
    if !splits.contains(&Split::Train) {
        return Err(Error::EmptyData("training split would be empty"));
    }
    ds.clone().with_splits(splits)
}

/// Evenly spaced column of inputs, useful for 1D predictive plots.
pub fn linspace_column(lo: f64, hi: f64, n: usize) -> Array2<f64> {
    let v: Array1<f64> = if n == 1 {
        Array1::from(vec![lo])
    } else {
        Array1::linspace(lo, hi, n)
    };
    v.insert_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    #[test]
    fn sine_small_shape_and_support() {
        let ds = gen_sine_small(0).unwrap();
        assert_eq!(ds.len(), 50);
        for &x in ds.x().column(0) {
            assert!((-3.0..=-1.7).contains(&x) || (2.2..=4.0).contains(&x));
        }
        assert_eq!(ds.indices(Split::Test).len(), 5);
        assert_eq!(ds.indices(Split::Validation).len(), 10);
    }

    #[test]
    fn sine_large_leaves_gap_empty() {
        let ds = gen_sine_large(1).unwrap();
        assert_eq!(ds.len(), 1400);
        assert!(ds.x().iter().all(|&x| !(x > -1.4 && x < 2.0)));
        assert_eq!(ds.indices(Split::Train).len(), 980);
        assert_eq!(ds.indices(Split::Validation).len(), 280);
        assert_eq!(ds.indices(Split::Test).len(), 140);
    }

    #[test]
    fn noise_free_sine_matches_formula() {
        let cfg = SineConfig {
            regions: vec![(-3.0, -3.0, 1), (4.0, 4.0, 1)],
            noise_std: 0.0,
            split_fractions: (0.0, 0.0),
        };
        let ds = cfg.generate(0).unwrap();
        assert_eq!(ds.raw_x()[[0, 0]], -3.0);
        assert_eq!(ds.raw_y()[[0, 0]], (-29.2f64).sin());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_sine_small(7).unwrap(), gen_sine_small(7).unwrap());
        assert_ne!(gen_sine_small(7).unwrap(), gen_sine_small(8).unwrap());
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_exact_matrix() {
        let f = write_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_csv(f.path(), &["y".into()], false).unwrap();
        assert_eq!(ds.x(), &array![[1.0, 2.0], [4.0, 5.0], [7.0, 8.0]]);
        assert_eq!(ds.y(), &array![[3.0], [6.0], [9.0]]);
    }

    #[test]
    fn csv_errors() {
        let f = write_csv("a,y\n1,2\nfoo,3\n");
        match load_csv(f.path(), &["y".into()], false) {
            Err(Error::NonNumericCell { row: 2, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("a,y\n1,2\n3\n");
        assert!(matches!(
            load_csv(f.path(), &["y".into()], false),
            Err(Error::RaggedRow { row: 2, .. })
        ));
        let f = write_csv("a,y\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), &["z".into()], false),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn standardization_uses_unbiased_std() {
        let f = write_csv("a,y\n0,1\n2,1\n");
        let ds = load_csv(f.path(), &["y".into()], true).unwrap();
        let stats = ds.x_stats().unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert!((stats.std[0] - 2f64.sqrt()).abs() < 1e-15);
        let f = write_csv("a,y\n0,1\n2,1\n1,1\n");
        let ds = load_csv(f.path(), &["y".into()], true).unwrap();
        let col: Vec<f64> = ds.x().column(0).to_vec();
        assert_eq!(col, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_column_gets_floor() {
        let f = write_csv("a,y\n5,1\n5,2\n");
        let ds = load_csv(f.path(), &["y".into()], true).unwrap();
        assert_eq!(ds.x_stats().unwrap().std[0], Standardizer::STD_FLOOR);
        assert!(ds.x().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gap_split_centering() {
        let x = Array2::from_shape_fn((100, 1), |(i, _)| ((i * 37) % 100) as f64);
        let y = Array2::zeros((100, 1));
        let ds = Dataset::new(x.clone(), y, Task::Regression).unwrap();
        let split = make_split(
            &ds,
            &SplitKind::Gap {
                feature: 0,
                val_fraction: 0.0,
                seed: 0,
            },
        )
        .unwrap();
        let mut test_vals: Vec<f64> = split
            .indices(Split::Test)
            .iter()
            .map(|&i| x[[i, 0]])
            .collect();
        test_vals.sort_by(f64::total_cmp);
        assert_eq!(test_vals, (45..=54).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn standard_split_counts() {
        let ds = Dataset::new(Array2::zeros((10, 1)), Array2::zeros((10, 1)), Task::Regression)
            .unwrap();
        let s = make_split(
            &ds,
            &SplitKind::Standard {
                test_fraction: 0.1,
                val_fraction: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(s.indices(Split::Test).len(), 1);
        assert_eq!(s.indices(Split::Train).len(), 9);
    }

    #[test]
    fn empty_split_is_error() {
        let ds = Dataset::new(Array2::zeros((3, 1)), Array2::zeros((3, 1)), Task::Regression)
            .unwrap();
        assert!(make_split(
            &ds,
            &SplitKind::Standard {
                test_fraction: 0.1,
                val_fraction: 0.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn stats_ignore_test_rows() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| (i * (j + 1)) as f64);
        let ds = Dataset::new(x, Array2::zeros((20, 1)), Task::Regression)
            .unwrap()
            .normalized(true, false);
        let kind = SplitKind::Gap {
            feature: 0,
            val_fraction: 0.0,
            seed: 0,
        };
        let a = make_split(&ds, &kind).unwrap();
        let mut raw = ds.raw_x().clone();
        for i in a.indices(Split::Test) {
            raw[[i, 1]] += 1000.0;
        }
        let perturbed = Dataset::new(raw, Array2::zeros((20, 1)), Task::Regression)
            .unwrap()
            .normalized(true, false);
        let b = make_split(&perturbed, &kind).unwrap();
        assert_eq!(a.x_stats(), b.x_stats());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = gen_sine_small(2).unwrap().normalized(true, true);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ds");
        ds.save(&stem).unwrap();
        assert_eq!(Dataset::load(&stem).unwrap(), ds);
    }
}
