//! Confusion-matrix metrics at a score threshold.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }

    pub fn actual_positive(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.predicted_positive())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.actual_positive())
    }

    /// `2tp / (2tp + fp + fn)`; 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `{0.01, …, 0.99}` plus midpoints between consecutive distinct scores.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
    out.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// F1-maximizing candidate; ties go to the smallest threshold.
pub fn best_f1_threshold(scores: &[f64], labels: &[u8], candidates: &[f64]) -> (f64, f64) {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted.first().copied().unwrap_or(0.5), f64::NEG_INFINITY);
    for t in sorted {
        let f1 = Confusion::at_threshold(scores, labels, t).f1();
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best
}
