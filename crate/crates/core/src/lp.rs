//! Linear programs over the action set.
//!
//! `solve_min_linear` minimizes `c·δ` over an [`ActionSet`]. Box-only sets
//! are separable and solved per coordinate; sets with extra affine rows go
//! through a dense two-phase tableau simplex with Bland's rule.

use crate::action::ActionSet;
use crate::error::{check_dim, Error, Result};

const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coefficients: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `min objective·x` subject to `constraints` and `x ≥ 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StandardForm {
    pub objective: Vec<f64>,
    pub constraints: Vec<LinearConstraint>,
}

impl StandardForm {
    pub fn new(objective: Vec<f64>) -> Self {
        StandardForm {
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn push(&mut self, coefficients: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(LinearConstraint {
            coefficients,
            relation,
            rhs,
        });
    }
}

struct Tableau {
    /// `rows × (cols + 1)`, last entry of each row is the right-hand side.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
    pivots: usize,
    pivot_cap: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.rows[r][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize, cost: &mut [f64]) -> Result<()> {
        self.pivots += 1;
        if self.pivots > self.pivot_cap {
            return Err(Error::SolverFailure(format!("pivot cap {} exceeded", self.pivot_cap)));
        }
        let p = self.rows[r][c];
        for v in &mut self.rows[r] {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pr) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                row[c] = 0.0;
            }
        }
        let f = cost[c];
        if f != 0.0 {
            for (v, pr) in cost.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            cost[c] = 0.0;
        }
        self.basis[r] = c;
        Ok(())
    }

    /// Runs Bland's rule on reduced-cost row `cost` (length cols + 1, last
    /// entry is minus the objective value). Columns `>= allowed` never enter.
    fn optimize(&mut self, cost: &mut [f64], allowed: usize) -> Result<bool> {
        loop {
            let entering = (0..allowed).find(|&j| cost[j] < -PIVOT_TOL);
            let Some(c) = entering else {
                return Ok(true);
            };
            let mut leaving: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][c];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    leaving = match leaving {
                        None => Some((r, ratio)),
                        Some((br, bratio)) => {
                            if ratio < bratio - PIVOT_TOL
                                || (ratio <= bratio + PIVOT_TOL && self.basis[r] < self.basis[br])
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bratio))
                            }
                        }
                    };
                }
            }
            match leaving {
                None => return Ok(false),
                Some((r, _)) => self.pivot(r, c, cost)?,
            }
        }
    }
}

/// Dense two-phase primal simplex with Bland's anti-cycling rule.
pub fn simplex_core(problem: &StandardForm) -> Result<LpSolution> {
    let n = problem.objective.len();
    for con in &problem.constraints {
        check_dim("constraint row", n, con.coefficients.len())?;
    }
    if problem
        .objective
        .iter()
        .chain(
            problem
                .constraints
                .iter()
                .flat_map(|c| c.coefficients.iter().chain([&c.rhs])),
        )
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite LP coefficient".into()));
    }

    // Normalize to non-negative right-hand sides.
    let rows: Vec<(Vec<f64>, Relation, f64)> = problem
        .constraints
        .iter()
        .map(|c| {
            if c.rhs < 0.0 {
                let flipped = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                (c.coefficients.iter().map(|v| -v).collect(), flipped, -c.rhs)
            } else {
                (c.coefficients.clone(), c.relation, c.rhs)
            }
        })
        .collect();
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let art_start = n + n_slack;
    let cols = art_start + n_art;

    let mut tab = Tableau {
        rows: vec![vec![0.0; cols + 1]; m],
        basis: vec![0; m],
        cols,
        pivots: 0,
        pivot_cap: 10 * (m + cols).pow(2),
    };
    let (mut s, mut a) = (n, art_start);
    for (r, (coef, rel, rhs)) in rows.iter().enumerate() {
        tab.rows[r][..n].copy_from_slice(coef);
        tab.rows[r][cols] = *rhs;
        match rel {
            Relation::Le => {
                tab.rows[r][s] = 1.0;
                tab.basis[r] = s;
                s += 1;
            }
            Relation::Ge => {
                tab.rows[r][s] = -1.0;
                s += 1;
                tab.rows[r][a] = 1.0;
                tab.basis[r] = a;
                a += 1;
            }
            Relation::Eq => {
                tab.rows[r][a] = 1.0;
                tab.basis[r] = a;
                a += 1;
            }
        }
    }

    if n_art > 0 {
        let mut cost = vec![0.0; cols + 1];
        for c in &mut cost[art_start..cols] {
            *c = 1.0;
        }
        for r in 0..m {
            if tab.basis[r] >= art_start {
                for (c, v) in cost.iter_mut().zip(&tab.rows[r]) {
                    *c -= v;
                }
            }
        }
        tab.optimize(&mut cost, cols)?;
        if -cost[cols] > 1e-7 {
            return Ok(LpSolution {
                x: vec![0.0; n],
                objective: f64::NAN,
                status: LpStatus::Infeasible,
            });
        }
        // Drive remaining (zero-valued) artificials out of the basis; rows
        // with no structural entry are redundant and dropped.
        let mut r = 0;
        while r < tab.rows.len() {
            if tab.basis[r] >= art_start {
                match (0..art_start).find(|&j| tab.rows[r][j].abs() > PIVOT_TOL) {
                    Some(c) => {
                        tab.pivot(r, c, &mut cost)?;
                        r += 1;
                    }
                    None => {
                        tab.rows.remove(r);
                        tab.basis.remove(r);
                    }
                }
            } else {
                r += 1;
            }
        }
    }

    let mut cost = vec![0.0; cols + 1];
    cost[..n].copy_from_slice(&problem.objective);
    for r in 0..tab.rows.len() {
        let cb = cost[tab.basis[r]];
        if cb != 0.0 {
            let row = tab.rows[r].clone();
            for (c, v) in cost.iter_mut().zip(&row) {
                *c -= cb * v;
            }
        }
    }
    if !tab.optimize(&mut cost, art_start)? {
        return Ok(LpSolution {
            x: vec![0.0; n],
            objective: f64::NEG_INFINITY,
            status: LpStatus::Unbounded,
        });
    }
    let mut x = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs(r).max(0.0);
        }
    }
    let objective = x.iter().zip(&problem.objective).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        x,
        objective,
        status: LpStatus::Optimal,
    })
}

/// `argmin_{δ ∈ Δ} c·δ`.
pub fn solve_min_linear(c: &[f64], aset: &ActionSet) -> Result<LpSolution> {
    check_dim("LP objective", aset.dim(), c.len())?;
    if aset.is_box() {
        Ok(solve_box(c, aset))
    } else {
        solve_with_simplex(c, aset)
    }
}

fn solve_box(c: &[f64], aset: &ActionSet) -> LpSolution {
    let x: Vec<f64> = c
        .iter()
        .zip(aset.lower.iter().zip(&aset.upper))
        .map(|(&ci, (&lo, &hi))| {
            if ci > 0.0 {
                lo
            } else if ci < 0.0 {
                hi
            } else {
                0.0
            }
        })
        .collect();
    let objective = x.iter().zip(c).map(|(a, b)| a * b).sum();
    LpSolution {
        x,
        objective,
        status: LpStatus::Optimal,
    }
}

/// Simplex route for any action set. Pinned coordinates are removed and the
/// rest shifted to `u = δ - lo ≥ 0`.
pub fn solve_with_simplex(c: &[f64], aset: &ActionSet) -> Result<LpSolution> {
    check_dim("LP objective", aset.dim(), c.len())?;
    let free = aset.actionable_indices();
    let k = free.len();
    let mut problem = StandardForm::new(free.iter().map(|&i| c[i]).collect());
    for (j, &i) in free.iter().enumerate() {
        let mut row = vec![0.0; k];
        row[j] = 1.0;
        problem.push(row, Relation::Le, aset.upper[i] - aset.lower[i]);
    }
    for extra in &aset.extras {
        // a·(u + lo) + b ≥ 0  ⇔  a_free·u ≥ -b - a·lo
        let row: Vec<f64> = free.iter().map(|&i| extra.coefficients[i]).collect();
        let shift: f64 = free.iter().map(|&i| extra.coefficients[i] * aset.lower[i]).sum();
        problem.push(row, Relation::Ge, -extra.offset - shift);
    }
    let sol = simplex_core(&problem)?;
    let mut x = vec![0.0; aset.dim()];
    if sol.status == LpStatus::Optimal {
        for (j, &i) in free.iter().enumerate() {
            x[i] = (sol.x[j] + aset.lower[i]).clamp(aset.lower[i], aset.upper[i]);
        }
    }
    let objective = match sol.status {
        LpStatus::Optimal => x.iter().zip(c).map(|(a, b)| a * b).sum(),
        _ => sol.objective,
    };
    Ok(LpSolution {
        x,
        objective,
        status: sol.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::AffineConstraint;
    use proptest::prelude::*;

    fn box_set(lower: &[f64], upper: &[f64]) -> ActionSet {
        ActionSet::from_bounds(lower.to_vec(), upper.to_vec(), 0.75, vec![]).unwrap()
    }

    fn grid_min(c: &[f64], aset: &ActionSet, step: f64) -> f64 {
        // Separable objective: brute-force each coordinate on its own grid.
        c.iter()
            .enumerate()
            .map(|(i, &ci)| {
                let n = ((aset.upper[i] - aset.lower[i]) / step).round() as usize;
                (0..=n)
                    .map(|k| ci * (aset.lower[i] + k as f64 * step).min(aset.upper[i]))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    #[test]
    fn zero_objective_prefers_zero_action() {
        let set = box_set(&[-0.75, 0.0], &[0.75, 0.75]);
        let sol = solve_min_linear(&[0.0, 0.0], &set).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn box_examples_match_grid() {
        let set = box_set(&[-0.75, -0.75], &[0.75, 0.75]);
        let sol = solve_min_linear(&[1.0, -2.0], &set).unwrap();
        assert_eq!(sol.x, vec![-0.75, 0.75]);
        assert!((sol.objective - -2.25).abs() < 1e-12);
        assert!((grid_min(&[1.0, -2.0], &set, 0.01) - -2.25).abs() < 1e-9);

        let inc = box_set(&[0.0], &[0.75]);
        let sol = solve_min_linear(&[-3.0], &inc).unwrap();
        assert_eq!(sol.x, vec![0.75]);
        assert!((grid_min(&[-3.0], &inc, 0.01) - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_simplex() {
        let mut p = StandardForm::new(vec![-1.0]);
        p.push(vec![1.0], Relation::Le, 1.0);
        let sol = simplex_core(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded_statuses() {
        let mut p = StandardForm::new(vec![1.0]);
        p.push(vec![1.0], Relation::Le, 1.0);
        p.push(vec![1.0], Relation::Ge, 2.0);
        assert_eq!(simplex_core(&p).unwrap().status, LpStatus::Infeasible);

        let mut p = StandardForm::new(vec![-1.0, 0.0]);
        p.push(vec![0.0, 1.0], Relation::Le, 1.0);
        assert_eq!(simplex_core(&p).unwrap().status, LpStatus::Unbounded);

        let mut p = StandardForm::new(vec![1.0]);
        p.push(vec![1.0, 2.0], Relation::Le, 1.0);
        assert!(matches!(simplex_core(&p), Err(Error::Shape { .. })));
    }

    #[test]
    fn equality_and_negative_rhs_rows() {
        // min x + y  s.t. x + y = 2, x - y >= -1 (i.e. y <= x + 1), x <= 1.5
        let mut p = StandardForm::new(vec![1.0, 2.0]);
        p.push(vec![1.0, 1.0], Relation::Eq, 2.0);
        p.push(vec![1.0, -1.0], Relation::Ge, -1.0);
        p.push(vec![1.0, 0.0], Relation::Le, 1.5);
        let sol = simplex_core(&p).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.x[0] - 1.5).abs() < 1e-9 && (sol.x[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn duplicated_constraints_do_not_change_optimum() {
        let set = box_set(&[-1.0, -1.0], &[1.0, 1.0]);
        let extra = AffineConstraint {
            coefficients: vec![-1.0, -1.0],
            offset: 0.5,
        };
        let mut once = set.clone();
        once.extras.push(extra.clone());
        let mut thrice = once.clone();
        thrice.extras.push(extra.clone());
        thrice.extras.push(extra);
        let c = [-1.0, -0.5];
        let a = solve_min_linear(&c, &once).unwrap();
        let b = solve_min_linear(&c, &thrice).unwrap();
        assert_eq!(a.status, LpStatus::Optimal);
        assert!((a.objective - b.objective).abs() < 1e-9);
        // x + y <= 0.5 within the unit box: optimum puts x = 1, y = -0.5.
        assert!((a.objective - -0.75).abs() < 1e-9);
    }

    fn arb_box_problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=6).prop_flat_map(|d| {
            (
                prop::collection::vec(-3.0f64..3.0, d),
                prop::collection::vec(-1.0f64..=0.0, d),
                prop::collection::vec(0.0f64..=1.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn closed_form_and_simplex_agree((c, lo, hi) in arb_box_problem()) {
            let set = ActionSet::from_bounds(lo, hi, 1.0, vec![]).unwrap();
            let a = solve_min_linear(&c, &set).unwrap();
            let b = solve_with_simplex(&c, &set).unwrap();
            prop_assert_eq!(b.status, LpStatus::Optimal);
            prop_assert!((a.objective - b.objective).abs() <= 1e-9);
            prop_assert!(a.objective <= 0.0);
            prop_assert!(set.contains(&a.x).unwrap() && set.contains(&b.x).unwrap());
        }

        #[test]
        fn positive_scaling_keeps_argmin((c, lo, hi) in arb_box_problem(), k in 0.01f64..100.0) {
            let set = ActionSet::from_bounds(lo, hi, 1.0, vec![]).unwrap();
            let a = solve_min_linear(&c, &set).unwrap();
            let scaled: Vec<f64> = c.iter().map(|v| v * k).collect();
            let b = solve_min_linear(&scaled, &set).unwrap();
            prop_assert_eq!(&a.x, &b.x);
            if a.objective != 0.0 {
                prop_assert!((b.objective / a.objective - k).abs() <= 1e-9 * k);
            }
        }
    }
}
