//! Global interpretability statistics: per-filter feature means, ridge
//! regression of probe probabilities on those means, coefficient
//! diagnostics, cross-tap correlation and filter ranking.

mod correlation;
mod diagnostics;
mod display;
mod ranking;
mod ridge;
mod student_t;

pub use correlation::{correlation_from_vectors, correlation_matrix, pearson, CorrelationBasis, CorrelationMatrix};
pub use diagnostics::{
    coefficient_standard_errors, diagnose, feature_mean_standard_errors, r_squared, residual_fraction, t_values,
    Diagnostics, FLAG_DEGENERATE_TARGET, FLAG_INFINITE_T, FLAG_INSUFFICIENT_SAMPLES,
};
pub use display::normalize_for_display;
pub use ranking::{rank_filters, rank_fit, ImportanceRanking, RankedFilter, DEFAULT_K};
pub use ridge::{ridge_fit, RidgeFit, DEFAULT_ALPHA};
pub use student_t::student_t_two_sided;

use crate::error::{Error, Result};
use crate::probe::ProbeTable;
use crate::tensor::{self, Tensor};

/// Raw per-channel spatial means of a single-sample activation.
pub fn extract_feature_means(activation: &Tensor) -> Vec<f64> {
    tensor::global_avg_pool(activation)
}

/// Regression inputs for one tap: `n` samples by `p` filter means, and the
/// probe probability of each sample as target.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    /// Row-major `n x p`.
    x: Vec<f64>,
    y: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(n: usize, p: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n < 2 || p < 1 {
            return Err(Error::shape(format!("design matrix needs n >= 2 and p >= 1, got {n} x {p}")));
        }
        if x.len() != n * p || y.len() != n {
            return Err(Error::shape(format!(
                "design matrix {n} x {p} got {} entries and {} targets",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        Ok(Self { n, p, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::shape("design matrix rows differ in length"));
        }
        Self::new(rows.len(), p, rows.concat(), y)
    }

    /// The tap's feature means against its own probe probabilities.
    pub fn from_probe_table(table: &ProbeTable, tap_id: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for r in table.tap_records(tap_id) {
            rows.push(r.feature_means.clone());
            y.push(r.probability);
        }
        if rows.is_empty() {
            return Err(Error::MissingTap(tap_id.to_string()));
        }
        Self::from_rows(&rows, y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub(crate) fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0f64; self.p];
        for i in 0..self.n {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums.into_iter().map(|s| s / self.n as f64).collect()
    }

    pub(crate) fn target_mean(&self) -> f64 {
        mean(&self.y)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    let mut s = 0f64;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}
