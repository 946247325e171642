//! Tabular datasets, seeded splits and standardisation.
//!
//! Standardisation parameters are fitted on the training rows only and then
//! applied unchanged to calibration and test rows.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Row-major feature matrix with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    n_features: usize,
    pub feature_names: Vec<String>,
    pub task: TaskKind,
}

impl Dataset {
    /// Build a dataset from a row-major feature buffer.
    ///
    /// Unlike [`load_csv`], this does not enforce `n ≥ 3`: small hand-built
    /// datasets (and empty ones for prior-only sampling) are useful in tests.
    pub fn new(
        features: Vec<f64>,
        labels: Vec<f64>,
        n_features: usize,
        feature_names: Vec<String>,
        task: TaskKind,
    ) -> Result<Self> {
        if features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_features,
                got: features.len(),
            });
        }
        if feature_names.len() != n_features {
            return Err(Error::DimensionMismatch {
                expected: n_features,
                got: feature_names.len(),
            });
        }
        if features.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite entries"));
        }
        if task == TaskKind::Classification && labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(invalid("classification labels must be 0 or 1"));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            feature_names,
            task,
        })
    }

    /// Convenience constructor from a list of rows with generated names.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>, task: TaskKind) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("rows have differing lengths"));
        }
        let names = (0..d).map(|j| format!("x{j}")).collect();
        Self::new(rows.concat(), labels, d, names, task)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }
}

/// Load a headed CSV whose final column is the label.
pub fn load_csv(path: impl AsRef<Path>, task: TaskKind) -> Result<Dataset> {
    let path = path.as_ref();
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.len() < 2 {
        return Err(data_err("need at least one feature column and a label".into()));
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        if record.len() != header.len() {
            return Err(data_err(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                record.len(),
                header.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                data_err(format!("row {}, column `{}`: non-numeric cell `{cell}`", line + 1, header[j]))
            })?;
            if !v.is_finite() {
                return Err(data_err(format!("row {}, column `{}`: non-finite value", line + 1, header[j])));
            }
            if j < d {
                features.push(v);
            } else {
                if task == TaskKind::Classification && v != 0.0 && v != 1.0 {
                    return Err(data_err(format!("row {}: label {v} is not 0 or 1", line + 1)));
                }
                labels.push(v);
            }
        }
    }
    if labels.len() < 3 {
        return Err(data_err(format!("need at least 3 rows, found {}", labels.len())));
    }
    Dataset::new(features, labels, d, header[..d].to_vec(), task)
}

/// Fractions of rows assigned to training, calibration and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.525,
            cal: 0.175,
            test: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// Shuffle `0..n` with `seed`, then cut: `floor(train·n)` training rows,
/// `floor(cal·n)` calibration rows, the remainder for test.
pub fn make_split(n: usize, ratios: SplitRatios, seed: u64) -> Result<SplitSpec> {
    let SplitRatios { train, cal, test } = ratios;
    if !(train > 0.0 && cal > 0.0 && test > 0.0) {
        return Err(invalid("split ratios must be positive"));
    }
    if (train + cal + test - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios sum to {}, not 1", train + cal + test)));
    }
    // The small epsilon keeps exact products such as 0.5·10 from flooring to 4.
    let n_train = (train * n as f64 + 1e-9).floor() as usize;
    let n_cal = (cal * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_cal == 0 || n_train + n_cal >= n {
        return Err(invalid(format!("n = {n} is too small for a three-way split")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let test_idx = perm.split_off(n_train + n_cal);
    let cal_idx = perm.split_off(n_train);
    Ok(SplitSpec {
        train_idx: perm,
        cal_idx,
        test_idx,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub sd: f64,
}

impl Affine {
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Per-column centring and scaling fitted on training rows.
///
/// Uses the population standard deviation (divide by `n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub features: Vec<Affine>,
    /// Present for regression: labels are standardised alongside features.
    pub label: Option<Affine>,
}

fn fit_affine(values: impl Iterator<Item = f64> + Clone, name: &str) -> Result<Affine> {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ConstantColumn(name.to_owned()));
    }
    Ok(Affine { mean, sd })
}

pub fn fit_standardizer(data: &Dataset, train_idx: &[usize]) -> Result<Standardizer> {
    if train_idx.len() < 2 {
        return Err(invalid("standardisation needs at least two training rows"));
    }
    let features = (0..data.n_features())
        .map(|j| {
            let col = train_idx.iter().map(move |&i| data.row(i)[j]);
            fit_affine(col, &data.feature_names[j])
        })
        .collect::<Result<Vec<_>>>()?;
    let label = match data.task {
        TaskKind::Regression => Some(fit_affine(
            train_idx.iter().map(|&i| data.label(i)),
            "label",
        )?),
        TaskKind::Classification => None,
    };
    Ok(Standardizer { features, label })
}

impl Standardizer {
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.features.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                got: data.n_features(),
            });
        }
        let d = data.n_features();
        let features = data
            .features
            .iter()
            .enumerate()
            .map(|(k, &v)| self.features[k % d].forward(v))
            .collect();
        let labels = match self.label {
            Some(a) => data.labels.iter().map(|&y| a.forward(y)).collect(),
            None => data.labels.clone(),
        };
        Ok(Dataset {
            features,
            labels,
            n_features: d,
            feature_names: data.feature_names.clone(),
            task: data.task,
        })
    }
}

pub fn apply_standardizer(std: &Standardizer, data: &Dataset) -> Result<Dataset> {
    std.apply(data)
}

/// `grid_size` evenly spaced candidate labels spanning the training labels.
pub fn label_grid(train_labels: &[f64], grid_size: usize) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(invalid("label grid needs at least two points"));
    }
    let (lo, hi) = train_labels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    if !(hi > lo) {
        return Err(invalid("training labels are degenerate (max == min)"));
    }
    let step = (hi - lo) / (grid_size - 1) as f64;
    let mut grid: Vec<f64> = (0..grid_size).map(|k| lo + step * k as f64).collect();
    grid[grid_size - 1] = hi;
    Ok(grid)
}

/// `Y = Xθ + ε` with standard-normal `X` and `ε ~ N(0, noise_sd²)`.
pub fn synthetic_regression(
    n: usize,
    true_theta: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_sd > 0.0) {
        return Err(invalid("noise_sd must be positive"));
    }
    let d = true_theta.len();
    let mut rng = rng_from_seed(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mean: f64 = row.iter().zip(true_theta).map(|(x, t)| x * t).sum();
        let eps: f64 = rng.sample(StandardNormal);
        labels.push(mean + noise_sd * eps);
        features.extend(row);
    }
    let names = (0..d).map(|j| format!("x{j}")).collect();
    Dataset::new(features, labels, d, names, TaskKind::Regression)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn data_path(name: &str) -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
    }

    #[test]
    fn loads_vendored_datasets() {
        let diabetes = load_csv(data_path("diabetes.csv"), TaskKind::Regression).unwrap();
        assert_eq!((diabetes.n_rows(), diabetes.n_features()), (442, 10));
        let cancer = load_csv(data_path("breast_cancer.csv"), TaskKind::Classification).unwrap();
        assert_eq!((cancer.n_rows(), cancer.n_features()), (569, 30));
    }

    #[test]
    fn rejects_non_numeric_cell() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,y\n1,2,3\n4,oops,6\n7,8,9").unwrap();
        let err = load_csv(f.path(), TaskKind::Regression).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");
    }

    #[test]
    fn rejects_bad_class_label_and_missing_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,y\n1,0\n2,1\n3,2").unwrap();
        assert!(load_csv(f.path(), TaskKind::Classification).is_err());
        let err = load_csv("/no/such/file.csv", TaskKind::Regression).unwrap_err();
        assert!(err.to_string().contains("/no/such/file.csv"));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = make_split(442, SplitRatios::default(), 0).unwrap();
        assert_eq!((s.train_idx.len(), s.cal_idx.len(), s.test_idx.len()), (232, 77, 133));
        let r = SplitRatios { train: 0.5, cal: 0.2, test: 0.3 };
        let s = make_split(10, r, 7).unwrap();
        assert_eq!((s.train_idx.len(), s.cal_idx.len(), s.test_idx.len()), (5, 2, 3));
        assert_eq!(s, make_split(10, r, 7).unwrap());
        assert!(make_split(2, SplitRatios::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_indices(n in 20usize..400, seed in any::<u64>(), a in 0.2f64..0.6, b in 0.1f64..0.3) {
            let r = SplitRatios { train: a, cal: b, test: 1.0 - a - b };
            let s = make_split(n, r, seed).unwrap();
            let mut all: Vec<usize> = s.train_idx.iter().chain(&s.cal_idx).chain(&s.test_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(!s.test_idx.is_empty());
        }
    }

    #[test]
    fn two_point_column_standardises_to_unit_population_sd() {
        let d = Dataset::from_rows(&[vec![1.0], vec![3.0], vec![2.0]], vec![0.0, 1.0, 5.0], TaskKind::Regression).unwrap();
        let s = fit_standardizer(&d, &[0, 1]).unwrap();
        let z = s.apply(&d).unwrap();
        assert!((z.row(0)[0] + 1.0).abs() < 1e-12);
        assert!((z.row(1)[0] - 1.0).abs() < 1e-12);
        // Third row equals the training mean.
        assert!(z.row(2)[0].abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_named_in_error() {
        let d = Dataset::new(
            vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0],
            vec![1.0, 2.0, 3.0],
            2,
            vec!["flat".into(), "ok".into()],
            TaskKind::Regression,
        )
        .unwrap();
        match fit_standardizer(&d, &[0, 1, 2]) {
            Err(Error::ConstantColumn(name)) => assert_eq!(name, "flat"),
            other => panic!("expected constant-column error, got {other:?}"),
        }
    }

    #[test]
    fn standardised_training_columns_have_zero_mean_unit_sd() {
        let data = synthetic_regression(200, &[1.0, -2.0, 0.5], 1.0, 3).unwrap();
        let split = make_split(200, SplitRatios::default(), 1).unwrap();
        let s = fit_standardizer(&data, &split.train_idx).unwrap();
        let train = s.apply(&data.subset(&split.train_idx)).unwrap();
        for j in 0..3 {
            let col = train.column(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        }
        // Leakage check: parameters refitted on calibration rows differ.
        let refit = fit_standardizer(&data, &split.cal_idx).unwrap();
        assert_ne!(refit, s);
    }

    #[test]
    fn label_grid_examples() {
        let g = label_grid(&[3.0, 0.0, 10.0], 100).unwrap();
        assert_eq!((g[0], g[99]), (0.0, 10.0));
        assert!((g[1] - 10.0 / 99.0).abs() < 1e-12);
        assert_eq!(label_grid(&[-1.0, 1.0], 3).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(label_grid(&[0.0, 1.0], 1).is_err());
        assert!(label_grid(&[2.0, 2.0], 5).is_err());
        let spacing: Vec<f64> = g.windows(2).map(|w| w[1] - w[0]).collect();
        let dev = spacing.iter().map(|s| (s - spacing[0]).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12 && spacing.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn synthetic_data_is_seeded_and_near_noiseless() {
        let theta = [0.7, -1.3];
        let a = synthetic_regression(50, &theta, 1e-8, 9).unwrap();
        assert_eq!(a, synthetic_regression(50, &theta, 1e-8, 9).unwrap());
        for (x, y) in a.rows().zip(a.labels()) {
            let fit: f64 = x.iter().zip(&theta).map(|(u, t)| u * t).sum();
            assert!((y - fit).abs() < 1e-6);
        }
        assert!(synthetic_regression(5, &theta, 0.0, 1).is_err());
    }

    #[test]
    fn ols_recovers_synthetic_coefficients() {
        // Closed-form 2x2 normal equations.
        let data = synthetic_regression(10_000, &[1.0, 0.0], 1.0, 11).unwrap();
        let (mut s00, mut s01, mut s11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (x, y) in data.rows().zip(data.labels()) {
            s00 += x[0] * x[0];
            s01 += x[0] * x[1];
            s11 += x[1] * x[1];
            r0 += x[0] * y;
            r1 += x[1] * y;
        }
        let det = s00 * s11 - s01 * s01;
        let b0 = (s11 * r0 - s01 * r1) / det;
        let b1 = (s00 * r1 - s01 * r0) / det;
        assert!((b0 - 1.0).abs() < 0.05 && b1.abs() < 0.05);
    }
}
