use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::DesignMatrix;
use crate::error::{Error, Result};

/// Regularisation strength used when none is given.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Relative pivot size below which an unregularised Gram matrix is treated
/// as singular.
const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
    pub p: usize,
}

impl RidgeFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut s = self.intercept;
        for (b, x) in self.coefficients.iter().zip(row) {
            s += b * x;
        }
        s
    }

    pub fn predict(&self, d: &DesignMatrix) -> Vec<f64> {
        (0..d.n()).map(|i| self.predict_row(d.row(i))).collect()
    }
}

/// Centered normal equations `(Xc' Xc + alpha I)` and `Xc' yc`, plus the
/// column and target means they were centered with.
pub(crate) struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
}

pub(crate) fn normal_equations(d: &DesignMatrix) -> NormalEquations {
    let (n, p) = (d.n(), d.p());
    let x_mean = d.column_means();
    let y_mean = d.target_mean();
    let mut xc = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for (j, (v, m)) in d.row(i).iter().zip(&x_mean).enumerate() {
            xc[(i, j)] = v - m;
        }
    }
    let yc = DVector::from_iterator(n, d.y().iter().map(|v| v - y_mean));
    let gram = xc.tr_mul(&xc);
    let rhs = xc.tr_mul(&yc);
    NormalEquations {
        gram,
        rhs,
        x_mean,
        y_mean,
    }
}

/// Cholesky factor of `gram + alpha I`.
pub(crate) fn factor(gram: &DMatrix<f64>, alpha: f64) -> Result<Cholesky<f64, Dyn>> {
    let p = gram.nrows();
    let mut a = gram.clone();
    for j in 0..p {
        a[(j, j)] += alpha;
    }
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    if alpha == 0.0 {
        let scale = (0..p).map(|j| gram[(j, j)]).fold(0f64, f64::max);
        let l = chol.l_dirty();
        let smallest = (0..p).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
        if !(scale > 0.0) || smallest <= SINGULAR_PIVOT * scale {
            return Err(Error::SingularSystem);
        }
    }
    Ok(chol)
}

/// Ridge regression with an unpenalised intercept.
///
/// Columns and target are centered, `(Xc' Xc + alpha I) b = Xc' yc` is solved
/// by Cholesky, and the intercept is `mean(y) - b . mean(x)`.
pub fn ridge_fit(d: &DesignMatrix, alpha: f64) -> Result<RidgeFit> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    let eq = normal_equations(d);
    let chol = factor(&eq.gram, alpha)?;
    let b = chol.solve(&eq.rhs);
    let coefficients: Vec<f64> = b.iter().copied().collect();
    let mut intercept = eq.y_mean;
    for (bj, mj) in coefficients.iter().zip(&eq.x_mean) {
        intercept -= bj * mj;
    }
    if !intercept.is_finite() || coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge solution".into()));
    }
    Ok(RidgeFit {
        intercept,
        coefficients,
        alpha,
        n: d.n(),
        p: d.p(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: &[&[f64]], y: &[f64]) -> DesignMatrix {
        DesignMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), y.to_vec()).unwrap()
    }

    #[test]
    fn constant_target_gives_zero_slope() {
        let d = dm(&[&[1.0, 0.3], &[2.0, -1.0], &[5.0, 2.0]], &[0.7, 0.7, 0.7]);
        for alpha in [0.0, 1.0, 10.0] {
            let f = ridge_fit(&d, alpha).unwrap();
            assert!(f.coefficients.iter().all(|&b| b.abs() < 1e-15), "{:?}", f.coefficients);
            assert!((f.intercept - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_ridge_closed_form() {
        let f = ridge_fit(&dm(&[&[1.0], &[-1.0]], &[1.0, -1.0]), 1.0).unwrap();
        assert!((f.coefficients[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(f.intercept.abs() < 1e-15);
    }

    #[test]
    fn ols_interpolates_two_points() {
        let f = ridge_fit(&dm(&[&[1.0], &[2.0]], &[2.0, 4.0]), 0.0).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_ols_is_singular() {
        let d = dm(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]], &[1.0, 2.0, 4.0]);
        assert!(matches!(ridge_fit(&d, 0.0), Err(Error::SingularSystem)));
        assert!(ridge_fit(&d, 0.1).is_ok());
        let constant_col = dm(&[&[1.0], &[1.0], &[1.0]], &[1.0, 2.0, 3.0]);
        assert!(matches!(ridge_fit(&constant_col, 0.0), Err(Error::SingularSystem)));
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let d = dm(&[&[1.0], &[2.0]], &[1.0, 2.0]);
        assert!(ridge_fit(&d, -1.0).is_err());
        assert!(ridge_fit(&d, f64::NAN).is_err());
    }
}
