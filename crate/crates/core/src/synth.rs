//! Seeded synthetic credit and income datasets with the shape of the usual
//! recourse benchmarks, for experiments when the real files are not at hand.
//!
//! Labels are drawn from a logistic model that leans on the non-actionable
//! columns, so a plainly trained classifier rarely leaves room for recourse
//! within a small action budget.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::data::{AffineSpec, DatasetConfig, FeatureSpec, Monotonicity};
use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub csv: String,
}

impl SyntheticDataset {
    pub fn config_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.config).map_err(|e| Error::Config(e.to_string()))
    }
}

const GERMAN_INTERCEPT: f64 = -1.3;
const GERMAN_DURATION: f64 = 0.6;
const GERMAN_GENDER: f64 = 0.35;
const GERMAN_AGE: f64 = 0.1;
const GERMAN_AMOUNT: f64 = 0.1;

pub const NAMES: [&str; 2] = ["german", "adult"];

pub fn by_name(name: &str, n: usize, seed: u64) -> Result<SyntheticDataset> {
    match name {
        "german" => Ok(german_like(n, seed)),
        "adult" => Ok(adult_like(n, seed)),
        other => Err(Error::Config(format!(
            "unknown synthetic dataset {other:?} (german, adult)"
        ))),
    }
}

fn clamp_round(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo, hi).round()
}

fn pick<'a, R: Rng>(rng: &mut R, levels: &[(&'a str, f64)]) -> &'a str {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (name, p) in levels {
        acc += p;
        if u < acc {
            return name;
        }
    }
    levels[levels.len() - 1].0
}

fn write_rows(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Four columns like the usual credit benchmark: gender, age, loan duration
/// and credit amount, with a weak signal and about 30% positives. Age
/// (increase only) and credit amount are actionable.
pub fn german_like(n: usize, seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age_d = Normal::new(35.0f64, 11.0).unwrap();
    let dur_d = Normal::new(21.0f64, 12.0).unwrap();
    let amount_d = LogNormal::new(2300f64.ln(), 0.75).unwrap();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let male = rng.gen_bool(0.69);
        let age = clamp_round(age_d.sample(&mut rng), 19.0, 75.0);
        let duration = clamp_round(dur_d.sample(&mut rng), 4.0, 72.0);
        let amount = amount_d.sample(&mut rng).clamp(250.0, 18500.0).round();
        let logit = GERMAN_INTERCEPT - GERMAN_DURATION * (duration - 21.0) / 12.0
            + GERMAN_GENDER * f64::from(u8::from(male))
            + GERMAN_AGE * (age - 35.0) / 11.0
            - GERMAN_AMOUNT * (amount.ln() - 2300f64.ln()) / 0.75;
        let good = rng.gen_bool(sigmoid(logit));
        rows.push(vec![
            u8::from(male).to_string(),
            age.to_string(),
            duration.to_string(),
            amount.to_string(),
            if good { "good" } else { "bad" }.to_string(),
        ]);
    }
    let csv = write_rows(&["gender", "age", "duration", "credit_amount", "risk"], rows);
    let config = DatasetConfig {
        label_column: "risk".into(),
        positive_label: "good".into(),
        positive_label_meaning: "low credit risk".into(),
        train_fraction: 0.8,
        test_holdout: (n / 10).max(1),
        delta_max: 0.75,
        features: vec![
            FeatureSpec::binary("gender").group_key(),
            FeatureSpec::continuous("age").actionable(Monotonicity::IncreaseOnly),
            FeatureSpec::continuous("duration"),
            FeatureSpec::continuous("credit_amount").actionable(Monotonicity::Free),
        ],
        constraints: vec![],
    };
    SyntheticDataset { config, csv }
}

/// About 25% high income; education and weekly hours may only increase,
/// and their combined increase is capped at one standardized unit.
pub fn adult_like(n: usize, seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age_d = Normal::new(38.5f64, 13.5).unwrap();
    let edu_d = Normal::new(10.0f64, 2.6).unwrap();
    let hours_d = Normal::new(40.5f64, 12.0).unwrap();
    let gain_d = LogNormal::new(8.5f64, 1.0).unwrap();
    let marital_levels = [
        ("married", 0.47),
        ("never-married", 0.33),
        ("divorced", 0.14),
        ("widowed", 0.06),
    ];
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let male = rng.gen_bool(0.67);
        let age = clamp_round(age_d.sample(&mut rng), 17.0, 90.0);
        let education = clamp_round(edu_d.sample(&mut rng), 1.0, 16.0);
        let hours = clamp_round(hours_d.sample(&mut rng), 1.0, 99.0);
        let gain: f64 = if rng.gen_bool(0.08) {
            gain_d.sample(&mut rng).round()
        } else {
            0.0
        };
        let marital = pick(&mut rng, &marital_levels);
        let logit = -2.1 + 0.7 * (age - 38.5) / 13.5 - 0.012 * (age - 45.0).powi(2) / 13.5
            + 0.35 * (education - 10.0) / 2.6
            + 0.2 * (hours - 40.5) / 12.0
            + 0.5 * f64::from(u8::from(male))
            + if gain > 0.0 { 1.6 } else { 0.0 }
            + if marital == "married" { 1.5 } else { -0.4 };
        let high = rng.gen_bool(sigmoid(logit));
        rows.push(vec![
            age.to_string(),
            education.to_string(),
            hours.to_string(),
            gain.to_string(),
            u8::from(male).to_string(),
            marital.to_string(),
            if high { ">50K" } else { "<=50K" }.to_string(),
        ]);
    }
    let csv = write_rows(
        &[
            "age",
            "education_num",
            "hours_per_week",
            "capital_gain",
            "sex",
            "marital_status",
            "income",
        ],
        rows,
    );
    let config = DatasetConfig {
        label_column: "income".into(),
        positive_label: ">50K".into(),
        positive_label_meaning: "income above 50K".into(),
        train_fraction: 0.8,
        test_holdout: 500.min(n / 10).max(1),
        delta_max: 0.75,
        features: vec![
            FeatureSpec::continuous("age"),
            FeatureSpec::continuous("education_num").actionable(Monotonicity::IncreaseOnly),
            FeatureSpec::continuous("hours_per_week").actionable(Monotonicity::IncreaseOnly),
            FeatureSpec::continuous("capital_gain"),
            FeatureSpec::binary("sex").group_key(),
            FeatureSpec::categorical("marital_status"),
        ],
        constraints: vec![AffineSpec {
            coefficients: BTreeMap::from([
                ("education_num".to_string(), -1.0),
                ("hours_per_week".to_string(), -1.0),
            ]),
            offset: 1.0,
        }],
    };
    SyntheticDataset { config, csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionSet;
    use crate::data::{load_from_csv_str, Split};

    #[test]
    fn german_loads_with_expected_shape() {
        let ds = german_like(1000, 1);
        let b = load_from_csv_str(&ds.config, &ds.csv, 0).unwrap();
        assert_eq!(b.len(), 1000);
        assert_eq!(b.dim(), 4);
        assert_eq!(b.count(Split::Test), 100);
        let rate = b.y.iter().filter(|&&y| y == 1).count() as f64 / 1000.0;
        assert!((0.2..0.4).contains(&rate), "{rate}");
        let aset = ActionSet::for_bundle(&b, None).unwrap();
        assert_eq!(aset.actionable_indices().len(), 2);
        assert!(aset.is_box());
    }

    #[test]
    fn adult_has_budget_constraint() {
        let ds = adult_like(3000, 2);
        let b = load_from_csv_str(&ds.config, &ds.csv, 0).unwrap();
        let rate = b.y.iter().filter(|&&y| y == 1).count() as f64 / 3000.0;
        assert!((0.15..0.4).contains(&rate), "{rate}");
        let aset = ActionSet::for_bundle(&b, None).unwrap();
        assert!(!aset.is_box());
        let mut d = vec![0.0; b.dim()];
        d[b.column_index("education_num").unwrap()] = 0.6;
        d[b.column_index("hours_per_week").unwrap()] = 0.6;
        assert!(!aset.contains(&d).unwrap());
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(german_like(50, 3), german_like(50, 3));
        assert_ne!(german_like(50, 3).csv, german_like(50, 4).csv);
        let toml = adult_like(20, 1).config_toml().unwrap();
        assert_eq!(DatasetConfig::from_toml(&toml).unwrap(), adult_like(20, 1).config);
    }
}
