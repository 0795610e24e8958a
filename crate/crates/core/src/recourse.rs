//! Recourse search for a single individual under a trained scorer.
//!
//! Three algorithms:
//! * adversarial (`lp`): one linear program on the loss gradient at `x`;
//! * gradient descent (`gd`): projected descent on
//!   `bce(g(x+δ), 1) + λ'·‖δ‖₂` starting from `δ = 0`;
//! * linear approximation (`linear`): fit a locally weighted linear
//!   surrogate of `g` around `x`, then find the `‖δ‖₁`-smallest action the
//!   surrogate says crosses the threshold.
//!
//! Every returned action lies in the action set, and `valid` is always
//! re-checked against the true scorer.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::action::ActionSet;
use crate::error::{check_dim, Error, Result};
use crate::lp::{self, LpStatus, Relation, StandardForm};
use crate::nn::{bce_loss, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecourseAlgorithm {
    #[serde(rename = "gd")]
    GradientDescent,
    #[serde(rename = "lp")]
    AdversarialTraining,
    #[serde(rename = "linear")]
    LinearApproximation,
}

impl RecourseAlgorithm {
    pub const ALL: [RecourseAlgorithm; 3] = [
        RecourseAlgorithm::LinearApproximation,
        RecourseAlgorithm::GradientDescent,
        RecourseAlgorithm::AdversarialTraining,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RecourseAlgorithm::GradientDescent => "gd",
            RecourseAlgorithm::AdversarialTraining => "lp",
            RecourseAlgorithm::LinearApproximation => "linear",
        }
    }

    /// Whether the action computed for a negative instance is independent
    /// of the decision threshold.
    pub fn threshold_free(self) -> bool {
        matches!(self, RecourseAlgorithm::AdversarialTraining)
    }
}

impl std::str::FromStr for RecourseAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" | "gradient-descent" => Ok(RecourseAlgorithm::GradientDescent),
            "lp" | "adversarial" | "adversarial-training" => Ok(RecourseAlgorithm::AdversarialTraining),
            "linear" | "linear-approximation" => Ok(RecourseAlgorithm::LinearApproximation),
            other => Err(Error::Config(format!("unknown recourse algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for RecourseAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseResult {
    pub delta: Vec<f64>,
    pub valid: bool,
    pub post_score: f64,
    pub algorithm: RecourseAlgorithm,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientDescentOptions {
    /// Initial weight of the `‖δ‖₂` penalty.
    pub lambda0: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Halve the penalty after this many consecutive iterations without a
    /// valid iterate.
    pub anneal_every: usize,
    /// Stop once a valid iterate exists and the smallest valid norm has not
    /// improved for this many iterations.
    pub patience: usize,
}

impl Default for GradientDescentOptions {
    fn default() -> Self {
        GradientDescentOptions {
            lambda0: 0.001,
            step_size: 0.05,
            steps: 500,
            anneal_every: 50,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOptions {
    pub samples: usize,
    /// Standard deviation of the Gaussian perturbations (standardized units).
    pub noise_std: f64,
    /// `None` means `0.75·sqrt(dim)`.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    /// Required surrogate slack above the threshold.
    pub margin: f64,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        SurrogateOptions {
            samples: 500,
            noise_std: 0.3,
            kernel_width: None,
            ridge: 1e-6,
            margin: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecourseOptions {
    pub gradient_descent: GradientDescentOptions,
    pub surrogate: SurrogateOptions,
}

/// `x + δ`, leaving coordinates with `δ_i == 0` bit-identical to `x`.
pub fn apply_action(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(delta)
        .map(|(&xi, &di)| if di == 0.0 { xi } else { xi + di })
        .collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_inputs(params: &Mlp, aset: &ActionSet, x: &[f64]) -> Result<()> {
    check_dim("recourse input", params.input_dim(), x.len())?;
    check_dim("action set", params.input_dim(), aset.dim())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite recourse input".into()));
    }
    Ok(())
}

fn already_positive(score: f64, threshold: f64, dim: usize, algorithm: RecourseAlgorithm) -> Option<RecourseResult> {
    (score >= threshold).then(|| RecourseResult {
        delta: vec![0.0; dim],
        valid: true,
        post_score: score,
        algorithm,
        iterations: 0,
    })
}

fn finish(params: &Mlp, x: &[f64], delta: Vec<f64>, algorithm: RecourseAlgorithm, iterations: usize) -> RecourseResult {
    let post_score = params.score(&apply_action(x, &delta));
    RecourseResult {
        valid: post_score >= params.threshold,
        delta,
        post_score,
        algorithm,
        iterations,
    }
}

/// `argmin_{δ ∈ Δ} ∇ₓ bce(g(x), 1)·δ`.
pub fn recourse_adversarial(params: &Mlp, aset: &ActionSet, x: &[f64]) -> Result<RecourseResult> {
    check_inputs(params, aset, x)?;
    let algorithm = RecourseAlgorithm::AdversarialTraining;
    if let Some(r) = already_positive(params.score(x), params.threshold, x.len(), algorithm) {
        return Ok(r);
    }
    let delta = adversarial_delta(params, aset, x)?;
    Ok(finish(params, x, delta, algorithm, 1))
}

/// The Taylor-LP action at `x`, regardless of the current prediction.
pub fn adversarial_delta(params: &Mlp, aset: &ActionSet, x: &[f64]) -> Result<Vec<f64>> {
    let grad = params.grad_input(x, 1)?;
    let sol = lp::solve_min_linear(&grad, aset)?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.x),
        status => Err(Error::SolverFailure(format!("action LP ended with {status:?}"))),
    }
}

pub fn recourse_gradient_descent(
    params: &Mlp,
    aset: &ActionSet,
    x: &[f64],
    opts: &GradientDescentOptions,
) -> Result<RecourseResult> {
    check_inputs(params, aset, x)?;
    let algorithm = RecourseAlgorithm::GradientDescent;
    if let Some(r) = already_positive(params.score(x), params.threshold, x.len(), algorithm) {
        return Ok(r);
    }
    if !aset.is_box() {
        return Err(Error::UnsupportedProjection);
    }
    let mut delta = vec![0.0; x.len()];
    let mut penalty = opts.lambda0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_valid = 0usize;
    let mut since_improved = 0usize;
    let mut iterations = 0;
    for _ in 0..opts.steps {
        iterations += 1;
        let point = apply_action(x, &delta);
        let mut grad = params.grad_input(&point, 1)?;
        let norm = norm2(&delta);
        if norm > 0.0 {
            for (g, d) in grad.iter_mut().zip(&delta) {
                *g += penalty * d / norm;
            }
        }
        let step: Vec<f64> = delta.iter().zip(&grad).map(|(d, g)| d - opts.step_size * g).collect();
        delta = aset.project_box(&step)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gradient-descent recourse diverged".into()));
        }

        let score = params.score(&apply_action(x, &delta));
        if score >= params.threshold {
            since_valid = 0;
            let n = norm2(&delta);
            match &best {
                Some((best_norm, _)) if *best_norm <= n => since_improved += 1,
                _ => {
                    best = Some((n, delta.clone()));
                    since_improved = 0;
                }
            }
            if since_improved >= opts.patience {
                break;
            }
        } else {
            if best.is_some() {
                since_improved += 1;
                if since_improved >= opts.patience {
                    break;
                }
            }
            since_valid += 1;
            if opts.anneal_every > 0 && since_valid.is_multiple_of(opts.anneal_every) {
                penalty /= 2.0;
            }
        }
    }
    let delta = best.map(|(_, d)| d).unwrap_or(delta);
    Ok(finish(params, x, delta, algorithm, iterations))
}

/// Linear model `g(z) ≈ intercept + coefficients·z` fitted around one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSurrogate {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Set when the weighted design was rank deficient and a ridge term
    /// was added.
    pub ridge_fallback: bool,
}

impl LocalSurrogate {
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }
}

fn perturbations(x: &[f64], opts: &SurrogateOptions, seed: u64) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, opts.noise_std).map_err(|e| Error::Config(format!("surrogate noise std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..opts.samples)
        .map(|_| x.iter().map(|v| v + normal.sample(&mut rng)).collect())
        .collect())
}

/// Kernel-weighted least squares fit of `score_fn` on Gaussian perturbations
/// of `x`.
pub fn fit_local_surrogate<F>(score_fn: F, x: &[f64], opts: &SurrogateOptions, seed: u64) -> Result<LocalSurrogate>
where
    F: Fn(&[f64]) -> f64,
{
    let d = x.len();
    if opts.samples < d + 1 {
        return Err(Error::Domain(format!(
            "surrogate needs at least {} samples, got {}",
            d + 1,
            opts.samples
        )));
    }
    let width = opts.kernel_width.unwrap_or(0.75 * (d as f64).sqrt());
    let samples = perturbations(x, opts, seed)?;

    // Design in centered coordinates z - x, so column 0 is the value at x.
    let n = samples.len();
    let mut design = DMatrix::<f64>::zeros(n, d + 1);
    let mut target = DVector::<f64>::zeros(n);
    for (k, z) in samples.iter().enumerate() {
        let dist2: f64 = z.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        let w = (-dist2 / (width * width)).exp().sqrt();
        design[(k, 0)] = w;
        for j in 0..d {
            design[(k, j + 1)] = w * (z[j] - x[j]);
        }
        target[k] = w * score_fn(z);
    }
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &target;
    let singular = design.clone().singular_values();
    let max_sv = singular.max();
    let min_sv = singular.min();
    let rank_deficient = !(max_sv > 0.0) || min_sv / max_sv < 1e-10;

    let solution = if rank_deficient {
        let regularized = &gram + DMatrix::<f64>::identity(d + 1, d + 1) * opts.ridge;
        regularized
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Numeric("ridge-regularized surrogate system is singular".into()))?
    } else {
        gram.clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::Numeric("surrogate normal equations are singular".into()))?
    };
    if rank_deficient {
        log::warn!("local surrogate design is rank deficient; used ridge {}", opts.ridge);
    }
    let coefficients: Vec<f64> = solution.iter().skip(1).copied().collect();
    let value_at_x = solution[0];
    let intercept = value_at_x - coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    Ok(LocalSurrogate {
        coefficients,
        intercept,
        ridge_fallback: rank_deficient,
    })
}

pub fn local_linear_surrogate(params: &Mlp, x: &[f64], opts: &SurrogateOptions, seed: u64) -> Result<LocalSurrogate> {
    check_dim("surrogate input", params.input_dim(), x.len())?;
    fit_local_surrogate(|z| params.score(z), x, opts, seed)
}

/// Coefficient of determination of `surrogate` against `score_fn` on fresh
/// local samples drawn with `seed`.
pub fn surrogate_r2<F>(
    score_fn: F,
    surrogate: &LocalSurrogate,
    x: &[f64],
    opts: &SurrogateOptions,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let samples = perturbations(x, opts, seed)?;
    let truth: Vec<f64> = samples.iter().map(|z| score_fn(z)).collect();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = samples
        .iter()
        .zip(&truth)
        .map(|(z, t)| (t - surrogate.predict(z)).powi(2))
        .sum();
    Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 })
}

/// Smallest-`‖δ‖₁` action in `aset` with `coefficients·δ ≥ required_gain`.
/// `None` when no such action exists.
pub fn min_l1_action(coefficients: &[f64], required_gain: f64, aset: &ActionSet) -> Result<Option<Vec<f64>>> {
    check_dim("surrogate coefficients", aset.dim(), coefficients.len())?;
    // Variables: positive parts for coordinates with hi > 0, then negative
    // parts for coordinates with lo < 0.
    let pos: Vec<usize> = (0..aset.dim()).filter(|&i| aset.upper[i] > 0.0).collect();
    let neg: Vec<usize> = (0..aset.dim()).filter(|&i| aset.lower[i] < 0.0).collect();
    let nv = pos.len() + neg.len();
    if nv == 0 {
        return Ok((required_gain <= 0.0).then(|| vec![0.0; aset.dim()]));
    }
    let row_of = |coef: &[f64]| -> Vec<f64> {
        pos.iter()
            .map(|&i| coef[i])
            .chain(neg.iter().map(|&i| -coef[i]))
            .collect()
    };
    let mut problem = StandardForm::new(vec![1.0; nv]);
    problem.push(row_of(coefficients), Relation::Ge, required_gain);
    for (j, &i) in pos.iter().enumerate() {
        let mut row = vec![0.0; nv];
        row[j] = 1.0;
        problem.push(row, Relation::Le, aset.upper[i]);
    }
    for (j, &i) in neg.iter().enumerate() {
        let mut row = vec![0.0; nv];
        row[pos.len() + j] = 1.0;
        problem.push(row, Relation::Le, -aset.lower[i]);
    }
    for extra in &aset.extras {
        problem.push(row_of(&extra.coefficients), Relation::Ge, -extra.offset);
    }
    let sol = lp::simplex_core(&problem)?;
    if sol.status != LpStatus::Optimal {
        return Ok(None);
    }
    let mut delta = vec![0.0; aset.dim()];
    for (j, &i) in pos.iter().enumerate() {
        delta[i] += sol.x[j];
    }
    for (j, &i) in neg.iter().enumerate() {
        delta[i] -= sol.x[pos.len() + j];
    }
    for (i, d) in delta.iter_mut().enumerate() {
        *d = d.clamp(aset.lower[i], aset.upper[i]);
    }
    Ok(Some(delta))
}

/// Linear-approximation recourse against an arbitrary scoring function.
pub fn recourse_linear_approx_with<F>(
    score_fn: F,
    threshold: f64,
    aset: &ActionSet,
    x: &[f64],
    opts: &SurrogateOptions,
    seed: u64,
) -> Result<RecourseResult>
where
    F: Fn(&[f64]) -> f64,
{
    check_dim("action set", x.len(), aset.dim())?;
    let algorithm = RecourseAlgorithm::LinearApproximation;
    let base = score_fn(x);
    if let Some(r) = already_positive(base, threshold, x.len(), algorithm) {
        return Ok(r);
    }
    let surrogate = fit_local_surrogate(&score_fn, x, opts, seed)?;
    let gain = threshold - base + opts.margin;
    let delta = min_l1_action(&surrogate.coefficients, gain, aset)?.unwrap_or_else(|| vec![0.0; x.len()]);
    let post_score = score_fn(&apply_action(x, &delta));
    Ok(RecourseResult {
        valid: post_score >= threshold,
        delta,
        post_score,
        algorithm,
        iterations: 1,
    })
}

pub fn recourse_linear_approx(
    params: &Mlp,
    aset: &ActionSet,
    x: &[f64],
    opts: &SurrogateOptions,
    seed: u64,
) -> Result<RecourseResult> {
    check_inputs(params, aset, x)?;
    recourse_linear_approx_with(|z| params.score(z), params.threshold, aset, x, opts, seed)
}

/// Dispatch on `algorithm`; `seed` only matters for the surrogate.
pub fn compute_recourse(
    algorithm: RecourseAlgorithm,
    params: &Mlp,
    aset: &ActionSet,
    x: &[f64],
    opts: &RecourseOptions,
    seed: u64,
) -> Result<RecourseResult> {
    match algorithm {
        RecourseAlgorithm::AdversarialTraining => recourse_adversarial(params, aset, x),
        RecourseAlgorithm::GradientDescent => recourse_gradient_descent(params, aset, x, &opts.gradient_descent),
        RecourseAlgorithm::LinearApproximation => recourse_linear_approx(params, aset, x, &opts.surrogate, seed),
    }
}

/// Per-instance seed derived from a run seed and the instance position.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0x632B_E59B_D9B4_E019)
}

/// Recourse loss `bce(g(x+δ), 1)` for a candidate action.
pub fn recourse_loss(params: &Mlp, x: &[f64], delta: &[f64]) -> f64 {
    bce_loss(params.score(&apply_action(x, delta)), 1)
}
