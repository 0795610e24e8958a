//! Metrics and experiment protocols.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::ActionSet;
use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::threshold_candidates;
pub use crate::metrics::Confusion;
use crate::nn::{sigmoid, Mlp};
use crate::recourse::{
    adversarial_delta, apply_action, compute_recourse, instance_seed, RecourseAlgorithm, RecourseOptions,
    RecourseResult,
};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseRates {
    pub algorithm: RecourseAlgorithm,
    pub recourse_neg: f64,
    pub recourse_all: f64,
    pub n: usize,
    pub n_neg: usize,
    /// Negatives whose recourse flips the prediction.
    pub n_found: usize,
    /// Set when there were no negatives; `recourse_neg` is then reported as 1.
    pub no_negatives: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub n: usize,
    pub confusion: Confusion,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub recourse: Vec<RecourseRates>,
}

impl MetricsReport {
    /// Named scalar metrics, recourse rates suffixed with the algorithm tag.
    pub fn flat(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("threshold".to_string(), self.threshold),
            ("f1".to_string(), self.f1),
            ("accuracy".to_string(), self.accuracy),
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
        ];
        for r in &self.recourse {
            out.push((format!("recourse_neg_{}", r.algorithm.tag()), r.recourse_neg));
            out.push((format!("recourse_all_{}", r.algorithm.tag()), r.recourse_all));
        }
        out
    }

    pub fn rates(&self, algorithm: RecourseAlgorithm) -> Option<&RecourseRates> {
        self.recourse.iter().find(|r| r.algorithm == algorithm)
    }
}

fn split_scores(params: &Mlp, bundle: &DatasetBundle, split: Split) -> (Vec<f64>, Vec<u8>) {
    let view = bundle.view(split);
    (view.x.iter().map(|x| params.score(x)).collect(), view.y)
}

fn non_empty(bundle: &DatasetBundle, split: Split) -> Result<()> {
    if bundle.count(split) == 0 {
        Err(Error::Config(format!("{split:?} split is empty")))
    } else {
        Ok(())
    }
}

/// Confusion-matrix metrics at `params.threshold`.
pub fn performance_metrics(params: &Mlp, bundle: &DatasetBundle, split: Split) -> Result<MetricsReport> {
    non_empty(bundle, split)?;
    let (scores, labels) = split_scores(params, bundle, split);
    let c = Confusion::at_threshold(&scores, &labels, params.threshold);
    Ok(MetricsReport {
        threshold: params.threshold,
        n: c.total(),
        confusion: c,
        f1: c.f1(),
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        recourse: Vec::new(),
    })
}

/// Recourse for every instance of `split`, in split order.
pub fn split_recourse(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<Vec<RecourseResult>> {
    let view = bundle.view(split);
    view.x
        .par_iter()
        .enumerate()
        .map(|(i, x)| compute_recourse(algorithm, params, aset, x, opts, instance_seed(seed, i)))
        .collect()
}

/// Rates from per-instance results; `original_positive[i]` is `f(x_i) = 1`.
pub fn rates_from_results(
    algorithm: RecourseAlgorithm,
    original_positive: &[bool],
    results: &[RecourseResult],
) -> RecourseRates {
    let n = results.len();
    let mut n_pos = 0;
    let mut n_found = 0;
    for (&pos, r) in original_positive.iter().zip(results) {
        if pos {
            n_pos += 1;
        } else if r.valid {
            n_found += 1;
        }
    }
    let n_neg = n - n_pos;
    RecourseRates {
        algorithm,
        recourse_neg: if n_neg == 0 { 1.0 } else { n_found as f64 / n_neg as f64 },
        recourse_all: if n == 0 {
            0.0
        } else {
            (n_pos + n_found) as f64 / n as f64
        },
        n,
        n_neg,
        n_found,
        no_negatives: n_neg == 0,
    }
}

pub fn recourse_metrics(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<RecourseRates> {
    non_empty(bundle, split)?;
    let results = split_recourse(params, aset, bundle, split, algorithm, opts, seed)?;
    let view = bundle.view(split);
    let positive: Vec<bool> = view.x.iter().map(|x| params.predict(x)).collect();
    Ok(rates_from_results(algorithm, &positive, &results))
}

/// Performance plus recourse rates for each algorithm.
pub fn evaluate(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    algorithms: &[RecourseAlgorithm],
    opts: &RecourseOptions,
    seed: u64,
) -> Result<MetricsReport> {
    let mut report = performance_metrics(params, bundle, split)?;
    for &alg in algorithms {
        report
            .recourse
            .push(recourse_metrics(params, aset, bundle, split, alg, opts, seed)?);
    }
    Ok(report)
}

/// recourse-all of the LP algorithm at several thresholds from one set of actions.
///
/// The LP action does not depend on the threshold, so it is computed once per instance.
pub fn lp_recourse_all_curve(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    non_empty(bundle, split)?;
    let view = bundle.view(split);
    let pairs: Vec<(f64, f64)> = view
        .x
        .par_iter()
        .map(|x| {
            let delta = adversarial_delta(params, aset, x)?;
            Ok((params.score(x), params.score(&apply_action(x, &delta))))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| pairs.iter().filter(|(s, s2)| *s >= t || *s2 >= t).count() as f64 / n)
        .collect())
}

/// Gaussian perturbation of actionable coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub scale: f64,
    /// Read `scale` as a variance instead of a standard deviation.
    #[serde(default)]
    pub scale_is_variance: bool,
}

impl NoiseModel {
    pub fn std_dev(std: f64) -> Self {
        NoiseModel {
            scale: std,
            scale_is_variance: false,
        }
    }

    pub fn std(&self) -> f64 {
        if self.scale_is_variance {
            self.scale.sqrt()
        } else {
            self.scale
        }
    }

    /// Noise vector for one instance: zero off the actionable coordinates.
    pub fn sample(&self, aset: &ActionSet, seed: u64) -> Result<Vec<f64>> {
        let std = self.std();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Domain(format!("noise scale {}: {e}", self.scale)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; aset.dim()];
        for i in aset.actionable_indices() {
            out[i] = if std == 0.0 { 0.0 } else { normal.sample(&mut rng) };
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub hits: usize,
    pub total: usize,
}

impl Fraction {
    /// `None` when there is nothing to count.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Among negatives with a valid recourse, the fraction still positive after adding noise to `δ`.
///
/// The noisy action is not projected back into the action set.
#[allow(clippy::too_many_arguments)]
pub fn recourse_robustness(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    noise: NoiseModel,
    seed: u64,
) -> Result<Fraction> {
    let results = split_recourse(params, aset, bundle, split, algorithm, opts, seed)?;
    let view = bundle.view(split);
    let mut hits = 0;
    let mut total = 0;
    for (i, (x, r)) in view.x.iter().zip(&results).enumerate() {
        if params.predict(x) || !r.valid {
            continue;
        }
        total += 1;
        let eps = noise.sample(aset, instance_seed(seed ^ 0x5eed, i))?;
        let noisy: Vec<f64> = r.delta.iter().zip(&eps).map(|(d, e)| d + e).collect();
        if params.predict(&apply_action(x, &noisy)) {
            hits += 1;
        }
    }
    Ok(Fraction { hits, total })
}

/// Fraction of instances whose prediction survives noise on the actionable coordinates.
pub fn model_brittleness(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    noise: NoiseModel,
    seed: u64,
) -> Result<Fraction> {
    let view = bundle.view(split);
    let mut hits = 0;
    for (i, x) in view.x.iter().enumerate() {
        let eps = noise.sample(aset, instance_seed(seed ^ 0x5eed, i))?;
        if params.predict(x) == params.predict(&apply_action(x, &eps)) {
            hits += 1;
        }
    }
    Ok(Fraction {
        hits,
        total: view.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub threshold: f64,
    /// Validation precision at `threshold`.
    pub precision: f64,
    /// False when no threshold reached the target and the most precise one was used.
    pub target_met: bool,
    pub majority: RecourseRates,
    pub minority: RecourseRates,
    /// Majority minus minority recourse-all.
    pub gap: f64,
}

/// Smallest validation threshold whose precision reaches `target`, with the precision and whether it was met.
pub fn threshold_for_precision(params: &Mlp, bundle: &DatasetBundle, target: f64) -> Result<(f64, f64, bool)> {
    non_empty(bundle, Split::Validation)?;
    let (scores, labels) = split_scores(params, bundle, Split::Validation);
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_candidates(&scores) {
        let c = Confusion::at_threshold(&scores, &labels, t);
        if c.predicted_positive() == 0 {
            continue;
        }
        let p = c.precision();
        if p >= target {
            return Ok((t, p, true));
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((t, p));
        }
    }
    let (t, p) = best.ok_or_else(|| Error::Domain("no threshold predicts any validation positive".into()))?;
    Ok((t, p, false))
}

/// recourse-all per group (group column value 1 is the majority) at the precision-matched threshold.
#[allow(clippy::too_many_arguments)]
pub fn recourse_disparity(
    params: &Mlp,
    aset: &ActionSet,
    bundle: &DatasetBundle,
    split: Split,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    target_precision: f64,
    seed: u64,
) -> Result<DisparityReport> {
    let group = bundle
        .group_column()
        .ok_or_else(|| Error::Config("dataset config declares no group key".into()))?;
    let (threshold, precision, target_met) = threshold_for_precision(params, bundle, target_precision)?;
    let mut model = params.clone();
    model.threshold = threshold;
    let view = bundle.view(split);
    let results = split_recourse(&model, aset, bundle, split, algorithm, opts, seed)?;
    let mut by_group: [(Vec<bool>, Vec<RecourseResult>); 2] = Default::default();
    for (x, r) in view.x.iter().zip(results) {
        let g = usize::from(x[group] == 1.0);
        by_group[g].0.push(model.predict(x));
        by_group[g].1.push(r);
    }
    if by_group.iter().any(|(p, _)| p.is_empty()) {
        return Err(Error::Config("disparity needs both groups present in the split".into()));
    }
    let minority = rates_from_results(algorithm, &by_group[0].0, &by_group[0].1);
    let majority = rates_from_results(algorithm, &by_group[1].0, &by_group[1].1);
    Ok(DisparityReport {
        threshold,
        precision,
        target_met,
        gap: majority.recourse_all - minority.recourse_all,
        majority,
        minority,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// How many times the split was redrawn because the holdout had one class.
    pub resplits: usize,
}

const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.1;
const PROBE_TRAIN_FRACTION: f64 = 0.7;
const PROBE_MAX_RESPLITS: usize = 100;

/// Held-out accuracy of a logistic regression separating originals (0) from recourse points (1).
pub fn distribution_probe(originals: &[Vec<f64>], recourse_points: &[Vec<f64>], seed: u64) -> Result<ProbeReport> {
    if originals.is_empty() || recourse_points.is_empty() {
        return Err(Error::Domain("probe needs both originals and recourse points".into()));
    }
    let d = originals[0].len();
    if let Some(bad) = originals.iter().chain(recourse_points).find(|r| r.len() != d) {
        return Err(Error::shape("probe input", d, bad.len()));
    }
    let data: Vec<(&[f64], f64)> = originals
        .iter()
        .map(|x| (x.as_slice(), 0.0))
        .chain(recourse_points.iter().map(|x| (x.as_slice(), 1.0)))
        .collect();
    let n_train = ((data.len() as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    if n_train == 0 || n_train >= data.len() {
        return Err(Error::Domain(format!(
            "probe split of {} points leaves an empty side",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut resplits = 0;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(resplits as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let test = &order[n_train..];
        let first = data[test[0]].1;
        if test.iter().any(|&i| data[i].1 != first) {
            break;
        }
        resplits += 1;
        if resplits > PROBE_MAX_RESPLITS {
            return Err(Error::Domain("probe holdout keeps containing a single class".into()));
        }
    }
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let m = train_idx.len() as f64;
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &i in train_idx {
            let (x, y) = data[i];
            let z = b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            let r = sigmoid(z) - y;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v;
            }
            gb += r;
        }
        for (a, g) in w.iter_mut().zip(&gw) {
            *a -= PROBE_LR * g / m;
        }
        b -= PROBE_LR * gb / m;
    }
    let correct = test_idx
        .iter()
        .filter(|&&i| {
            let (x, y) = data[i];
            let z = b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            (sigmoid(z) >= 0.5) == (y == 1.0)
        })
        .count();
    Ok(ProbeReport {
        accuracy: correct as f64 / test_idx.len() as f64,
        n_train,
        n_test: test_idx.len(),
        resplits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Lambda,
    Threshold,
    DeltaMax,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "threshold" | "theta" => Ok(SweepAxis::Threshold),
            "delta-max" | "delta_max" => Ok(SweepAxis::DeltaMax),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (lambda, threshold, delta-max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// One data split and training seed per entry.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub algorithms: Vec<RecourseAlgorithm>,
    pub options: RecourseOptions,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Mean and standard error across seeds for each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub metrics: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Sample mean and standard error (0 for a single sample).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the sweep; `load(seed)` supplies the dataset split for each seed.
pub fn sweep<F>(spec: &SweepSpec, load: F) -> Result<SweepTable>
where
    F: Fn(u64) -> Result<DatasetBundle>,
{
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let bundle = load(seed)?;
        let train_cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let shared = match spec.axis {
            SweepAxis::Threshold => {
                let aset = ActionSet::for_bundle(&bundle, None)?;
                Some((train(&bundle, &aset, &train_cfg)?.params, aset))
            }
            _ => None,
        };
        for &value in &spec.values {
            let (params, aset) = match spec.axis {
                SweepAxis::Threshold => {
                    let (p, a) = shared.as_ref().expect("trained above");
                    let mut p = p.clone();
                    p.threshold = value;
                    (p, a.clone())
                }
                SweepAxis::Lambda => {
                    let aset = ActionSet::for_bundle(&bundle, None)?;
                    let cfg = TrainConfig {
                        lambda: value,
                        ..train_cfg.clone()
                    };
                    (train(&bundle, &aset, &cfg)?.params, aset)
                }
                SweepAxis::DeltaMax => {
                    let aset = ActionSet::for_bundle(&bundle, Some(value))?;
                    (train(&bundle, &aset, &train_cfg)?.params, aset)
                }
            };
            let report = evaluate(
                &params,
                &aset,
                &bundle,
                spec.split,
                &spec.algorithms,
                &spec.options,
                seed,
            )?;
            log::info!("sweep {:?}={value} seed {seed}: F1 {:.3}", spec.axis, report.f1);
            rows.push(SweepRow { value, seed, report });
        }
    }
    let summary = spec
        .values
        .iter()
        .map(|&value| {
            let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for row in rows.iter().filter(|r| r.value == value) {
                for (name, v) in row.report.flat() {
                    columns.entry(name).or_default().push(v);
                }
            }
            SweepSummary {
                value,
                metrics: columns.into_iter().map(|(k, v)| (k, mean_and_stderr(&v))).collect(),
            }
        })
        .collect();
    Ok(SweepTable {
        axis: spec.axis,
        rows,
        summary,
    })
}

impl SweepTable {
    /// One CSV line per (value, seed) with every flat metric.
    pub fn rows_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if let Some(first) = self.rows.first() {
            let mut header = vec!["value".to_string(), "seed".to_string()];
            header.extend(first.report.flat().into_iter().map(|(k, _)| k));
            w.write_record(&header)?;
        }
        for row in &self.rows {
            let mut rec = vec![row.value.to_string(), row.seed.to_string()];
            rec.extend(row.report.flat().into_iter().map(|(_, v)| v.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// One CSV line per value with `<metric>_mean` and `<metric>_se` columns.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if let Some(first) = self.summary.first() {
            let mut header = vec!["value".to_string()];
            for k in first.metrics.keys() {
                header.push(format!("{k}_mean"));
                header.push(format!("{k}_se"));
            }
            w.write_record(&header)?;
        }
        for s in &self.summary {
            let mut rec = vec![s.value.to_string()];
            for (m, se) in s.metrics.values() {
                rec.push(m.to_string());
                rec.push(se.to_string());
            }
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
