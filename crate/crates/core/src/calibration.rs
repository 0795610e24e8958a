//! Threshold calibration with a PAC guarantee that recourse exists.
//!
//! For every calibration input we compute a recourse and record the score
//! of the moved point. Those points all "should" be labeled 1, so a
//! threshold τ misclassifies one of them when `s < τ`. The threshold is the
//! `(k*+1)`-th smallest score where `k*` is the largest error count whose
//! binomial tail under miscoverage rate ε stays at or below α.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::ActionSet;
use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::{best_f1_threshold, Confusion};
use crate::nn::Mlp;
use crate::recourse::{compute_recourse, instance_seed, RecourseAlgorithm, RecourseOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    /// Number of calibration errors allowed; -1 when even zero is too many.
    pub k_star: i64,
    pub n: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub algorithm: Option<RecourseAlgorithm>,
    /// Where the calibration inputs came from.
    #[serde(default)]
    pub source: String,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in (0,1), got {v}")))
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Walks the binomial pmf in log space, yielding the running log-CDF.
struct LogCdf {
    n: u64,
    j: u64,
    log_odds: f64,
    log_pmf: f64,
    log_cdf: f64,
}

impl LogCdf {
    fn new(n: u64, p: f64) -> Self {
        let log_pmf = n as f64 * (-p).ln_1p();
        LogCdf {
            n,
            j: 0,
            log_odds: p.ln() - (-p).ln_1p(),
            log_pmf,
            log_cdf: log_pmf,
        }
    }

    fn advance(&mut self) {
        let j = self.j;
        self.log_pmf += ((self.n - j) as f64).ln() - ((j + 1) as f64).ln() + self.log_odds;
        self.log_cdf = log_add(self.log_cdf, self.log_pmf);
        self.j += 1;
    }

    fn cdf(&self) -> f64 {
        if self.j >= self.n {
            1.0
        } else {
            self.log_cdf.exp().min(1.0)
        }
    }
}

/// `P[Bin(n, p) <= k]`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!("k = {k} exceeds n = {n}")));
    }
    check_unit("p", p)?;
    if k == n {
        return Ok(1.0);
    }
    let mut walk = LogCdf::new(n, p);
    while walk.j < k {
        walk.advance();
    }
    Ok(walk.cdf())
}

/// Largest `k` with `binomial_cdf(k, n, epsilon) <= alpha`, or -1.
pub fn error_budget(n: usize, epsilon: f64, alpha: f64) -> Result<i64> {
    check_unit("epsilon", epsilon)?;
    check_unit("alpha", alpha)?;
    let n = n as u64;
    let mut walk = LogCdf::new(n, epsilon);
    let mut k_star = -1i64;
    while walk.j < n && walk.cdf() <= alpha {
        k_star = walk.j as i64;
        walk.advance();
    }
    Ok(k_star)
}

pub fn pac_threshold(scores: &[f64], epsilon: f64, alpha: f64) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::Domain("calibration needs at least one score".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite calibration score {bad}")));
    }
    let k_star = error_budget(scores.len(), epsilon, alpha)?;
    let tau = if k_star >= 0 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[k_star as usize]
    } else {
        0.0
    };
    Ok(CalibrationResult {
        tau,
        k_star,
        n: scores.len(),
        epsilon,
        alpha,
        algorithm: None,
        source: String::new(),
    })
}

/// Scores `g(x + A(x))` for each input, computed in parallel.
///
/// Inputs already predicted positive at the current threshold get `δ = 0`.
pub fn build_z_prime(
    params: &Mlp,
    aset: &ActionSet,
    inputs: &[&[f64]],
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| compute_recourse(algorithm, params, aset, x, opts, instance_seed(seed, i)).map(|r| r.post_score))
        .collect()
}

/// Calibrates on the validation split and sets `params.threshold = τ̂`.
#[allow(clippy::too_many_arguments)]
pub fn pare_calibrate(
    params: &mut Mlp,
    bundle: &DatasetBundle,
    aset: &ActionSet,
    epsilon: f64,
    alpha: f64,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<CalibrationResult> {
    let view = bundle.view(Split::Validation);
    let scores = build_z_prime(params, aset, &view.x, algorithm, opts, seed)?;
    let mut result = pac_threshold(&scores, epsilon, alpha)?;
    result.algorithm = Some(algorithm);
    result.source = "validation split".into();
    params.threshold = result.tau;
    Ok(result)
}

/// `increments` equally spaced thresholds in `[0, bound]`.
pub fn threshold_grid(bound: f64, increments: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&bound) {
        return Err(Error::Domain(format!("threshold bound must lie in [0,1], got {bound}")));
    }
    if increments < 2 {
        return Err(Error::Domain(format!("need at least 2 increments, got {increments}")));
    }
    let step = bound / (increments - 1) as f64;
    Ok((0..increments)
        .map(|i| if i + 1 == increments { bound } else { i as f64 * step })
        .collect())
}

/// Validation-F1 maximizer over [`threshold_grid`]; ties go to the smaller value.
pub fn select_threshold_f1_under_pare(
    params: &Mlp,
    bundle: &DatasetBundle,
    bound: f64,
    increments: usize,
) -> Result<f64> {
    let grid = threshold_grid(bound, increments)?;
    let view = bundle.view(Split::Validation);
    let scores: Vec<f64> = view.x.iter().map(|x| params.score(x)).collect();
    Ok(best_f1_threshold(&scores, &view.y, &grid).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Keep the validation-F1 threshold picked during training.
    F1Max,
    Pare {
        epsilon: f64,
        alpha: f64,
    },
    PareThenF1 {
        epsilon: f64,
        alpha: f64,
        increments: usize,
    },
    Fixed {
        threshold: f64,
    },
}

/// Validation F1 of `params` at its current threshold.
pub fn validation_f1(params: &Mlp, bundle: &DatasetBundle) -> f64 {
    let view = bundle.view(Split::Validation);
    let scores: Vec<f64> = view.x.iter().map(|x| params.score(x)).collect();
    Confusion::at_threshold(&scores, &view.y, params.threshold).f1()
}

/// Sets `params.threshold` according to `policy`; returns the certificate if one was computed.
pub fn apply_policy(
    params: &mut Mlp,
    bundle: &DatasetBundle,
    aset: &ActionSet,
    policy: ThresholdPolicy,
    algorithm: RecourseAlgorithm,
    opts: &RecourseOptions,
    seed: u64,
) -> Result<Option<CalibrationResult>> {
    match policy {
        ThresholdPolicy::F1Max => Ok(None),
        ThresholdPolicy::Fixed { threshold } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Config(format!(
                    "fixed threshold must lie in [0,1], got {threshold}"
                )));
            }
            params.threshold = threshold;
            Ok(None)
        }
        ThresholdPolicy::Pare { epsilon, alpha } => {
            pare_calibrate(params, bundle, aset, epsilon, alpha, algorithm, opts, seed).map(Some)
        }
        ThresholdPolicy::PareThenF1 {
            epsilon,
            alpha,
            increments,
        } => {
            let cert = pare_calibrate(params, bundle, aset, epsilon, alpha, algorithm, opts, seed)?;
            params.threshold = select_threshold_f1_under_pare(params, bundle, cert.tau, increments)?;
            Ok(Some(cert))
        }
    }
}
