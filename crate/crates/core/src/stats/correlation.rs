use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeTable;

/// Which per-tap vectors are correlated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationBasis {
    /// Probe probabilities over the interpretability samples.
    #[default]
    #[serde(alias = "probe")]
    ProbeOutputs,
    /// Ridge coefficients; needs the same filter count at every tap.
    #[serde(alias = "coef")]
    CoefficientVectors,
}

impl CorrelationBasis {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationBasis::ProbeOutputs => "probe_outputs",
            CorrelationBasis::CoefficientVectors => "coefficient_vectors",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    /// Row-major `m x m`.
    pub values: Vec<f64>,
    /// Set for pairs where either vector has zero variance.
    pub degenerate: Vec<bool>,
    pub basis: CorrelationBasis,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn is_degenerate(&self, i: usize, j: usize) -> bool {
        self.degenerate[i * self.len() + j]
    }
}

/// Pearson correlation of two equal-length vectors. Returns `(0.0, true)` when
/// either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "pearson on vectors of different length");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return (0.0, true);
    }
    ((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), false)
}

/// Correlation of labelled vectors. The diagonal is exactly 1 unless the
/// vector is constant.
pub fn correlation_from_vectors(
    labels: Vec<String>,
    vectors: &[Vec<f64>],
    basis: CorrelationBasis,
) -> Result<CorrelationMatrix> {
    let m = labels.len();
    if vectors.len() != m {
        return Err(Error::shape(format!("{m} labels for {} vectors", vectors.len())));
    }
    let len = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != len) {
        let counts: Vec<String> = labels
            .iter()
            .zip(vectors)
            .map(|(l, v)| format!("{l}={}", v.len()))
            .collect();
        return Err(match basis {
            CorrelationBasis::CoefficientVectors => {
                Error::BasisUnavailable(format!("filter counts differ across taps: {}", counts.join(", ")))
            }
            CorrelationBasis::ProbeOutputs => Error::shape(format!("vector lengths differ: {}", counts.join(", "))),
        });
    }
    if m > 0 && len < 2 {
        return Err(Error::BasisUnavailable(format!(
            "{} correlation needs vectors of length >= 2, got {len}",
            basis.as_str()
        )));
    }
    let mut values = vec![0f64; m * m];
    let mut degenerate = vec![false; m * m];
    for i in 0..m {
        for j in i..m {
            let (mut r, flag) = pearson(&vectors[i], &vectors[j]);
            if i == j && !flag {
                r = 1.0;
            }
            values[i * m + j] = r;
            values[j * m + i] = r;
            degenerate[i * m + j] = flag;
            degenerate[j * m + i] = flag;
        }
    }
    Ok(CorrelationMatrix {
        labels,
        values,
        degenerate,
        basis,
    })
}

/// Tap-by-tap correlation of probe probabilities across samples.
pub fn correlation_matrix(table: &ProbeTable) -> Result<CorrelationMatrix> {
    let labels = table.tap_ids().to_vec();
    let vectors: Vec<Vec<f64>> = labels.iter().map(|t| table.probabilities(t)).collect();
    correlation_from_vectors(labels, &vectors, CorrelationBasis::ProbeOutputs)
}
