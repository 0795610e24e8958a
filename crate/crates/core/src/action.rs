//! The set of permissible actions `{δ : lo ≤ δ ≤ hi, a_k·δ + b_k ≥ 0}`.
//!
//! Per-coordinate bounds come from the feature metadata: a non-actionable
//! column is pinned to zero, an increase-only column gets `[0, δ_max]`, a
//! decrease-only column `[-δ_max, 0]` and a free column `[-δ_max, δ_max]`.
//! Every set contains the zero action.

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, DatasetBundle, FeatureSpec, Monotonicity};
use crate::error::{check_dim, Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-9;

/// `coefficients · δ + offset ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub coefficients: Vec<f64>,
    pub offset: f64,
}

impl AffineConstraint {
    pub fn value(&self, delta: &[f64]) -> f64 {
        self.coefficients.iter().zip(delta).map(|(a, d)| a * d).sum::<f64>() + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub delta_max: f64,
    pub extras: Vec<AffineConstraint>,
}

fn interval(actionable: bool, monotonicity: Monotonicity, delta_max: f64) -> (f64, f64) {
    if !actionable {
        return (0.0, 0.0);
    }
    match monotonicity {
        Monotonicity::Free => (-delta_max, delta_max),
        Monotonicity::IncreaseOnly => (0.0, delta_max),
        Monotonicity::DecreaseOnly => (-delta_max, 0.0),
    }
}

impl ActionSet {
    /// One coordinate per spec.
    pub fn build(specs: &[FeatureSpec], delta_max: f64, extras: Vec<AffineConstraint>) -> Result<Self> {
        let (lower, upper) = specs
            .iter()
            .map(|s| interval(s.actionable, s.monotonicity, delta_max))
            .unzip();
        Self::from_bounds(lower, upper, delta_max, extras)
    }

    /// Coordinates follow the encoded columns of `bundle`; one-hot columns
    /// are always pinned. `delta_max` overrides the dataset default.
    pub fn for_bundle(bundle: &DatasetBundle, delta_max: Option<f64>) -> Result<Self> {
        let delta_max = delta_max.unwrap_or(bundle.delta_max);
        let (lower, upper) = bundle
            .columns
            .iter()
            .map(|c| {
                let spec = &bundle.specs[c.feature];
                let actionable = spec.actionable && !matches!(c.kind, ColumnKind::OneHot { .. });
                interval(actionable, spec.monotonicity, delta_max)
            })
            .unzip();
        let extras = bundle
            .constraints
            .iter()
            .map(|c| {
                let mut coefficients = vec![0.0; bundle.dim()];
                for (name, &a) in &c.coefficients {
                    let col = bundle
                        .column_index(name)
                        .ok_or_else(|| Error::Config(format!("constraint references unknown column `{name}`")))?;
                    coefficients[col] = a;
                }
                Ok(AffineConstraint {
                    coefficients,
                    offset: c.offset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bounds(lower, upper, delta_max, extras)
    }

    pub fn from_bounds(
        lower: Vec<f64>,
        upper: Vec<f64>,
        delta_max: f64,
        extras: Vec<AffineConstraint>,
    ) -> Result<Self> {
        if !(delta_max > 0.0 && delta_max.is_finite()) {
            return Err(Error::InvalidActionSet(format!(
                "delta_max must be positive, got {delta_max}"
            )));
        }
        check_dim("action set bounds", lower.len(), upper.len())?;
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > 0.0 || hi < 0.0 {
                return Err(Error::InvalidActionSet(format!(
                    "coordinate {i} interval [{lo}, {hi}] must be finite and contain 0"
                )));
            }
        }
        for (k, c) in extras.iter().enumerate() {
            check_dim("affine constraint", lower.len(), c.coefficients.len())?;
            if !(c.offset >= 0.0) {
                return Err(Error::InvalidActionSet(format!(
                    "extra constraint {k} excludes the zero action (offset {} < 0)",
                    c.offset
                )));
            }
        }
        Ok(ActionSet {
            lower,
            upper,
            delta_max,
            extras,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_box(&self) -> bool {
        self.extras.is_empty()
    }

    pub fn is_actionable(&self, i: usize) -> bool {
        self.lower[i] < self.upper[i]
    }

    pub fn actionable_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.is_actionable(i)).collect()
    }

    pub fn contains(&self, delta: &[f64]) -> Result<bool> {
        check_dim("action", self.dim(), delta.len())?;
        let in_box = delta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&d, (&lo, &hi))| d >= lo - FEASIBILITY_TOL && d <= hi + FEASIBILITY_TOL);
        Ok(in_box && self.extras.iter().all(|c| c.value(delta) >= -FEASIBILITY_TOL))
    }

    /// Euclidean projection onto the box; only defined without extras.
    pub fn project_box(&self, delta: &[f64]) -> Result<Vec<f64>> {
        if !self.is_box() {
            return Err(Error::UnsupportedProjection);
        }
        check_dim("action", self.dim(), delta.len())?;
        Ok(delta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&d, (&lo, &hi))| d.clamp(lo, hi))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn free2() -> ActionSet {
        ActionSet::build(
            &[
                FeatureSpec::continuous("a").actionable(Monotonicity::Free),
                FeatureSpec::continuous("b").actionable(Monotonicity::Free),
            ],
            0.75,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn bounds_follow_feature_metadata() {
        let set = ActionSet::build(
            &[
                FeatureSpec::continuous("edu").actionable(Monotonicity::IncreaseOnly),
                FeatureSpec::continuous("age"),
                FeatureSpec::continuous("debt").actionable(Monotonicity::DecreaseOnly),
            ],
            0.75,
            vec![],
        )
        .unwrap();
        assert_eq!(set.lower, vec![0.0, 0.0, -0.75]);
        assert_eq!(set.upper, vec![0.75, 0.0, 0.0]);
        assert_eq!(set.actionable_indices(), vec![0, 2]);
        assert_eq!(free2().lower, vec![-0.75, -0.75]);
    }

    #[test]
    fn constraint_excluding_zero_is_rejected() {
        let bad = AffineConstraint {
            coefficients: vec![1.0, 1.0],
            offset: -0.1,
        };
        let err = ActionSet::from_bounds(vec![-1.0; 2], vec![1.0; 2], 1.0, vec![bad]).unwrap_err();
        assert!(matches!(err, Error::InvalidActionSet(_)));
        assert!(ActionSet::from_bounds(vec![0.1], vec![1.0], 1.0, vec![]).is_err());
    }

    #[test]
    fn contains_basics() {
        let set = free2();
        assert!(set.contains(&[0.0, 0.0]).unwrap());
        assert!(!set.contains(&[0.76, 0.0]).unwrap());
        assert!(set.contains(&[0.75 + 1e-10, -0.75]).unwrap());
        assert!(set.contains(&[0.0]).is_err());
    }

    #[test]
    fn project_box_clamps() {
        let set = free2();
        assert_eq!(set.project_box(&[1.0, -1.0]).unwrap(), vec![0.75, -0.75]);
        assert_eq!(set.project_box(&[0.1, -0.2]).unwrap(), vec![0.1, -0.2]);
        let mut with_extra = free2();
        with_extra.extras.push(AffineConstraint {
            coefficients: vec![1.0, 0.0],
            offset: 0.5,
        });
        assert!(matches!(
            with_extra.project_box(&[0.0, 0.0]),
            Err(Error::UnsupportedProjection)
        ));
    }

    #[test]
    fn projection_is_grid_nearest_point() {
        let set = ActionSet::from_bounds(vec![-0.5, 0.0], vec![0.75, 0.4], 0.75, vec![]).unwrap();
        let step = 0.01;
        let grid: Vec<(f64, f64)> = (0..=125)
            .flat_map(|i| (0..=40).map(move |j| (-0.5 + i as f64 * step, j as f64 * step)))
            .collect();
        for target in [[1.3, -0.2], [0.2, 0.2], [-2.0, 5.0], [0.61, 0.05]] {
            let p = set.project_box(&target).unwrap();
            let best = grid
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - target[0]).powi(2) + (a.1 - target[1]).powi(2);
                    let db = (b.0 - target[0]).powi(2) + (b.1 - target[1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert!((p[0] - best.0).abs() <= step && (p[1] - best.1).abs() <= step);
        }
    }

    fn arb_set() -> impl Strategy<Value = ActionSet> {
        (1usize..6)
            .prop_flat_map(|d| {
                (
                    prop::collection::vec((-1.0f64..=0.0, 0.0f64..=1.0), d),
                    prop::collection::vec((prop::collection::vec(-1.0f64..1.0, d), 0.0f64..1.0), 0..4),
                )
            })
            .prop_map(|(bounds, extras)| {
                let (lower, upper) = bounds.into_iter().unzip();
                let extras = extras
                    .into_iter()
                    .map(|(coefficients, offset)| AffineConstraint { coefficients, offset })
                    .collect();
                ActionSet::from_bounds(lower, upper, 1.0, extras).unwrap()
            })
    }

    proptest! {
        #[test]
        fn zero_always_contained(set in arb_set()) {
            prop_assert!(set.contains(&vec![0.0; set.dim()]).unwrap());
        }

        #[test]
        fn projection_is_feasible_and_idempotent(
            bounds in prop::collection::vec((-1.0f64..=0.0, 0.0f64..=1.0), 1..6),
            seed in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (lower, upper): (Vec<f64>, Vec<f64>) = bounds.into_iter().unzip();
            let set = ActionSet::from_bounds(lower, upper, 1.0, vec![]).unwrap();
            let delta = &seed[..set.dim()];
            let p = set.project_box(delta).unwrap();
            prop_assert!(set.contains(&p).unwrap());
            prop_assert_eq!(set.project_box(&p).unwrap(), p);
        }

        #[test]
        fn contains_matches_direct_evaluation_and_ignores_order(
            set in arb_set(),
            point in prop::collection::vec(-1.2f64..1.2, 6),
        ) {
            let delta = &point[..set.dim()];
            let mut direct = true;
            for i in 0..set.dim() {
                direct &= delta[i] >= set.lower[i] - FEASIBILITY_TOL && delta[i] <= set.upper[i] + FEASIBILITY_TOL;
            }
            for c in &set.extras {
                let mut v = c.offset;
                for i in 0..set.dim() {
                    v += c.coefficients[i] * delta[i];
                }
                direct &= v >= -FEASIBILITY_TOL;
            }
            prop_assert_eq!(set.contains(delta).unwrap(), direct);
            let mut reversed = set.clone();
            reversed.extras.reverse();
            prop_assert_eq!(reversed.contains(delta).unwrap(), direct);
        }
    }
}
