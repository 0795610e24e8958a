//! Tabular dataset loading: CSV parsing, one-hot expansion, train-only
//! standardization and seeded train/validation/test splits.
//!
//! A dataset is described by a TOML config naming the label column, the
//! raw label value that counts as the positive outcome, and one
//! [`FeatureSpec`] per used column. Rows are shuffled once with the seed;
//! the first `train_fraction` become train, the rest validation, and the
//! last `test_holdout` validation rows are moved to the test split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    #[serde(alias = "categorical")]
    CategoricalOneHot,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monotonicity {
    #[default]
    Free,
    IncreaseOnly,
    DecreaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub actionable: bool,
    #[serde(default)]
    pub monotonicity: Monotonicity,
    /// Marks the binary column that splits majority (1) from minority (0).
    #[serde(default)]
    pub group_key: bool,
}

impl FeatureSpec {
    pub fn continuous(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Continuous,
            actionable: false,
            monotonicity: Monotonicity::Free,
            group_key: false,
        }
    }

    pub fn binary(name: &str) -> Self {
        FeatureSpec {
            kind: FeatureKind::Binary,
            ..Self::continuous(name)
        }
    }

    pub fn categorical(name: &str) -> Self {
        FeatureSpec {
            kind: FeatureKind::CategoricalOneHot,
            ..Self::continuous(name)
        }
    }

    pub fn group_key(mut self) -> Self {
        self.group_key = true;
        self
    }

    pub fn actionable(mut self, monotonicity: Monotonicity) -> Self {
        self.actionable = true;
        self.monotonicity = monotonicity;
        self
    }
}

/// Extra action constraint `Σ coefficients[name]·δ_name + offset ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    pub coefficients: BTreeMap<String, f64>,
    #[serde(default)]
    pub offset: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_delta_max() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub label_column: String,
    pub positive_label: String,
    #[serde(default)]
    pub positive_label_meaning: String,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub test_holdout: usize,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub constraints: Vec<AffineSpec>,
}

impl DatasetConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: DatasetConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("no features listed".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(Error::Config("delta_max must be positive and finite".into()));
        }
        let mut seen = BTreeSet::new();
        let mut group_keys = 0;
        for spec in &self.features {
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Config(format!("feature `{}` listed twice", spec.name)));
            }
            if spec.name == self.label_column {
                return Err(Error::Config(format!(
                    "label column `{}` cannot also be a feature",
                    spec.name
                )));
            }
            if spec.kind == FeatureKind::CategoricalOneHot && spec.actionable {
                return Err(Error::Config(format!(
                    "categorical feature `{}` cannot be actionable",
                    spec.name
                )));
            }
            if spec.group_key {
                group_keys += 1;
                if spec.kind != FeatureKind::Binary {
                    return Err(Error::Config(format!(
                        "group key `{}` must be a binary feature",
                        spec.name
                    )));
                }
            }
        }
        if group_keys > 1 {
            return Err(Error::Config("at most one feature may be the group key".into()));
        }
        for c in &self.constraints {
            for name in c.coefficients.keys() {
                let spec = self
                    .features
                    .iter()
                    .find(|s| &s.name == name)
                    .ok_or_else(|| Error::Config(format!("constraint references unknown feature `{name}`")))?;
                if spec.kind == FeatureKind::CategoricalOneHot {
                    return Err(Error::Config(format!(
                        "constraint references categorical feature `{name}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    Binary,
    OneHot { level: String },
}

/// One numeric column of the encoded feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// Index into [`DatasetBundle::specs`].
    pub feature: usize,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    /// Population mean and standard deviation; a constant column keeps std 1.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Standardization { mean, std }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub split: Vec<Split>,
    pub columns: Vec<Column>,
    pub specs: Vec<FeatureSpec>,
    /// `Some` for continuous columns, indexed like `columns`.
    pub standardization: Vec<Option<Standardization>>,
    pub constraints: Vec<AffineSpec>,
    pub delta_max: f64,
    pub positive_label_meaning: String,
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    /// Borrowed rows and labels of one split, in row order.
    pub fn view(&self, split: Split) -> SplitView<'_> {
        let idx = self.indices(split);
        SplitView {
            x: idx.iter().map(|&i| self.x[i].as_slice()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            rows: idx,
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Column holding the majority/minority indicator, if configured.
    pub fn group_column(&self) -> Option<usize> {
        let feature = self.specs.iter().position(|s| s.group_key)?;
        self.columns.iter().position(|c| c.feature == feature)
    }

    /// Maps a standardized row back to raw units for continuous columns.
    pub fn destandardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.standardization)
            .map(|(&v, s)| match s {
                Some(s) => s.invert(v),
                None => v,
            })
            .collect()
    }

    /// Raw-unit size of a standardized change on column `col`.
    pub fn destandardize_delta(&self, col: usize, delta: f64) -> f64 {
        match self.standardization[col] {
            Some(s) => delta * s.std,
            None => delta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitView<'a> {
    pub rows: Vec<usize>,
    pub x: Vec<&'a [f64]>,
    pub y: Vec<u8>,
}

impl SplitView<'_> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "?" | "NA" | "na" | "NaN" | "nan" | "null")
}

fn labels_match(cell: &str, positive: &str) -> bool {
    if cell == positive {
        return true;
    }
    match (cell.parse::<f64>(), positive.parse::<f64>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

pub fn load_dataset(config_path: &Path, csv_path: &Path, seed: u64) -> Result<DatasetBundle> {
    let config = DatasetConfig::from_path(config_path)?;
    let reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path)?;
    load_from_reader(&config, reader, seed)
}

pub fn load_from_csv_str(config: &DatasetConfig, csv_text: &str, seed: u64) -> Result<DatasetBundle> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    load_from_reader(config, reader, seed)
}

fn load_from_reader<R: std::io::Read>(
    config: &DatasetConfig,
    mut reader: csv::Reader<R>,
    seed: u64,
) -> Result<DatasetBundle> {
    config.validate()?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in CSV header")))
    };
    let label_idx = find(&config.label_column)?;
    let feature_idx = config
        .features
        .iter()
        .map(|s| find(&s.name))
        .collect::<Result<Vec<_>>>()?;

    // Raw pass: keep complete rows as strings; parse numeric cells eagerly so
    // errors carry the data row index (1-based, header excluded).
    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_no + 1;
        let label_cell = record.get(label_idx).unwrap_or("");
        let cells: Vec<&str> = feature_idx.iter().map(|&i| record.get(i).unwrap_or("")).collect();
        if is_missing(label_cell) || cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        for (spec, cell) in config.features.iter().zip(&cells) {
            match spec.kind {
                FeatureKind::Continuous => {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        row,
                        column: spec.name.clone(),
                        message: format!("`{cell}` is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            row,
                            column: spec.name.clone(),
                            message: "non-finite value".into(),
                        });
                    }
                }
                FeatureKind::Binary => {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        row,
                        column: spec.name.clone(),
                        message: format!("`{cell}` is not 0 or 1"),
                    })?;
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Parse {
                            row,
                            column: spec.name.clone(),
                            message: format!("`{cell}` is not 0 or 1"),
                        });
                    }
                }
                FeatureKind::CategoricalOneHot => {}
            }
        }
        labels.push(u8::from(labels_match(label_cell, &config.positive_label)));
        raw.push(cells.into_iter().map(str::to_string).collect());
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values");
    }

    // Column layout; categorical levels are sorted for a stable encoding.
    let mut columns = Vec::new();
    for (f, spec) in config.features.iter().enumerate() {
        match spec.kind {
            FeatureKind::Continuous => columns.push(Column {
                name: spec.name.clone(),
                feature: f,
                kind: ColumnKind::Continuous,
            }),
            FeatureKind::Binary => columns.push(Column {
                name: spec.name.clone(),
                feature: f,
                kind: ColumnKind::Binary,
            }),
            FeatureKind::CategoricalOneHot => {
                let levels: BTreeSet<&str> = raw.iter().map(|r| r[f].as_str()).collect();
                for level in levels {
                    columns.push(Column {
                        name: format!("{}={}", spec.name, level),
                        feature: f,
                        kind: ColumnKind::OneHot {
                            level: level.to_string(),
                        },
                    });
                }
            }
        }
    }

    let mut x: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            columns
                .iter()
                .map(|c| {
                    let cell = &r[c.feature];
                    match &c.kind {
                        ColumnKind::Continuous | ColumnKind::Binary => cell.parse().expect("validated above"),
                        ColumnKind::OneHot { level } => f64::from(u8::from(cell == level)),
                    }
                })
                .collect()
        })
        .collect();

    let split = assign_splits(x.len(), config.train_fraction, config.test_holdout, seed)?;

    let standardization: Vec<Option<Standardization>> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| match c.kind {
            ColumnKind::Continuous => {
                let train: Vec<f64> = x
                    .iter()
                    .zip(&split)
                    .filter(|(_, s)| **s == Split::Train)
                    .map(|(r, _)| r[j])
                    .collect();
                Some(Standardization::fit(&train))
            }
            _ => None,
        })
        .collect();
    for row in &mut x {
        for (v, s) in row.iter_mut().zip(&standardization) {
            if let Some(s) = s {
                *v = s.apply(*v);
            }
        }
    }

    Ok(DatasetBundle {
        x,
        y: labels,
        split,
        columns,
        specs: config.features.clone(),
        standardization,
        constraints: config.constraints.clone(),
        delta_max: config.delta_max,
        positive_label_meaning: config.positive_label_meaning.clone(),
    })
}

/// Split tags as a function of `(seed, n_rows)` only.
pub fn assign_splits(n_rows: usize, train_fraction: f64, test_holdout: usize, seed: u64) -> Result<Vec<Split>> {
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (train_fraction * n_rows as f64).round() as usize;
    let n_validation = n_rows.saturating_sub(n_train);
    if n_train == 0 {
        return Err(Error::Config("train split is empty".into()));
    }
    if test_holdout == 0 {
        return Err(Error::Config("test split is empty (test_holdout = 0)".into()));
    }
    if test_holdout >= n_validation {
        return Err(Error::Config(format!(
            "validation split is empty: test_holdout {test_holdout} consumes all {n_validation} validation rows"
        )));
    }
    let mut split = vec![Split::Train; n_rows];
    for (rank, &row) in order.iter().enumerate() {
        split[row] = if rank < n_train {
            Split::Train
        } else if rank < n_rows - test_holdout {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(split)
}

/// Keeps `n` test rows chosen uniformly without replacement; the other test
/// rows are removed from the bundle.
pub fn subsample_test(bundle: &DatasetBundle, n: usize, seed: u64) -> Result<DatasetBundle> {
    let test = bundle.indices(Split::Test);
    if n > test.len() {
        return Err(Error::Bounds(format!(
            "requested {n} test rows but only {} are available",
            test.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: BTreeSet<usize> = rand::seq::index::sample(&mut rng, test.len(), n)
        .into_iter()
        .map(|k| test[k])
        .collect();
    let retained: Vec<usize> = (0..bundle.len())
        .filter(|&i| bundle.split[i] != Split::Test || keep.contains(&i))
        .collect();
    let mut out = bundle.clone();
    out.x = retained.iter().map(|&i| bundle.x[i].clone()).collect();
    out.y = retained.iter().map(|&i| bundle.y[i]).collect();
    out.split = retained.iter().map(|&i| bundle.split[i]).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(features: Vec<FeatureSpec>, holdout: usize) -> DatasetConfig {
        DatasetConfig {
            label_column: "y".into(),
            positive_label: "1".into(),
            positive_label_meaning: "good".into(),
            train_fraction: 0.8,
            test_holdout: holdout,
            delta_max: 0.75,
            features,
            constraints: vec![],
        }
    }

    fn csv_of(n: usize) -> String {
        let mut s = String::from("a,c,y\n");
        for i in 0..n {
            let level = ["red", "green", "blue"][i % 3];
            s.push_str(&format!("{},{},{}\n", i as f64 * 0.5, level, i % 2));
        }
        s
    }

    #[test]
    fn two_train_rows_standardize_to_unit_values() {
        let s = Standardization::fit(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!([s.apply(1.0), s.apply(3.0)], [-1.0, 1.0]);
    }

    #[test]
    fn train_statistics_are_zero_mean_unit_variance() {
        let bundle = load_from_csv_str(&config(vec![FeatureSpec::continuous("a")], 3), &csv_of(50), 7).unwrap();
        let train: Vec<f64> = bundle.view(Split::Train).x.iter().map(|r| r[0]).collect();
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn categorical_expands_to_exclusive_one_hot() {
        let spec = FeatureSpec {
            name: "c".into(),
            kind: FeatureKind::CategoricalOneHot,
            actionable: false,
            monotonicity: Monotonicity::Free,
            group_key: false,
        };
        let bundle = load_from_csv_str(&config(vec![spec], 2), &csv_of(30), 1).unwrap();
        assert_eq!(bundle.dim(), 3);
        assert_eq!(bundle.columns[0].name, "c=blue");
        for row in &bundle.x {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert!(bundle.standardization.iter().all(Option::is_none));
    }

    #[test]
    fn missing_label_column_is_config_error() {
        let mut cfg = config(vec![FeatureSpec::continuous("a")], 2);
        cfg.label_column = "nope".into();
        let err = load_from_csv_str(&cfg, &csv_of(20), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let err = load_from_csv_str(
            &config(vec![FeatureSpec::continuous("a")], 1),
            "a,y\n1,1\nabc,0\n3,1\n",
            0,
        )
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_rows_are_dropped() {
        let bundle = load_from_csv_str(
            &config(vec![FeatureSpec::continuous("a")], 1),
            "a,y\n1,1\n?,0\n3,1\n4,0\n5,1\n6,0\n7,1\n8,1\n9,0\n10,1\n11,0\n",
            0,
        )
        .unwrap();
        assert_eq!(bundle.len(), 10);
    }

    #[test]
    fn empty_test_split_is_config_error() {
        let err = load_from_csv_str(&config(vec![FeatureSpec::continuous("a")], 0), &csv_of(20), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = load_from_csv_str(&config(vec![FeatureSpec::continuous("a")], 4), &csv_of(20), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn split_proportions_follow_config() {
        let split = assign_splits(1000, 0.8, 100, 3).unwrap();
        let count = |s| split.iter().filter(|&&t| t == s).count();
        assert_eq!(count(Split::Train), 800);
        assert_eq!(count(Split::Validation), 100);
        assert_eq!(count(Split::Test), 100);
        assert_eq!(split, assign_splits(1000, 0.8, 100, 3).unwrap());
        assert_ne!(split, assign_splits(1000, 0.8, 100, 4).unwrap());
    }

    #[test]
    fn categorical_actionable_and_double_group_key_rejected() {
        let mut cat = FeatureSpec::continuous("c");
        cat.kind = FeatureKind::CategoricalOneHot;
        cat.actionable = true;
        assert!(config(vec![cat], 1).validate().is_err());

        let mut g1 = FeatureSpec::continuous("g1");
        g1.kind = FeatureKind::Binary;
        g1.group_key = true;
        let mut g2 = g1.clone();
        g2.name = "g2".into();
        assert!(config(vec![g1, g2], 1).validate().is_err());
    }

    #[test]
    fn subsample_test_bounds_and_determinism() {
        let bundle = load_from_csv_str(&config(vec![FeatureSpec::continuous("a")], 10), &csv_of(100), 5).unwrap();
        let same = subsample_test(&bundle, 10, 1).unwrap();
        assert_eq!(same.x, bundle.x);
        let a = subsample_test(&bundle, 4, 9).unwrap();
        let b = subsample_test(&bundle, 4, 9).unwrap();
        assert_eq!(a.count(Split::Test), 4);
        assert_eq!(a.x, b.x);
        assert_eq!(a.count(Split::Train), bundle.count(Split::Train));
        assert!(matches!(subsample_test(&bundle, 11, 0), Err(Error::Bounds(_))));
    }
}
