use super::ridge::{factor, normal_equations, RidgeFit};
use super::{mean, student_t_two_sided, DesignMatrix};
use crate::error::{Error, Result};

fn sums_of_squares(fit: &RidgeFit, d: &DesignMatrix) -> (f64, f64) {
    let y_mean = mean(d.y());
    let mut ss_res = 0f64;
    let mut ss_tot = 0f64;
    for (i, &y) in d.y().iter().enumerate() {
        let e = y - fit.predict_row(d.row(i));
        ss_res += e * e;
        ss_tot += (y - y_mean) * (y - y_mean);
    }
    (ss_res, ss_tot)
}

/// `SS_res / SS_tot`, the unexplained share of target variance.
pub fn residual_fraction(fit: &RidgeFit, d: &DesignMatrix) -> Result<f64> {
    let (ss_res, ss_tot) = sums_of_squares(fit, d);
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    Ok(ss_res / ss_tot)
}

/// Coefficient of determination, unclamped and clamped to `[0, 1]`.
pub fn r_squared(fit: &RidgeFit, d: &DesignMatrix) -> Result<(f64, f64)> {
    let raw = 1.0 - residual_fraction(fit, d)?;
    Ok((raw, raw.clamp(0.0, 1.0)))
}

/// Standard errors of the ridge coefficients.
///
/// `SE_j = sqrt(s2 * [A^-1 G A^-1]_jj)` with `G = Xc' Xc`, `A = G + alpha I`
/// and `s2 = SS_res / (n - p - 1)`. With `alpha = 0` this is the ordinary
/// least-squares standard error.
pub fn coefficient_standard_errors(fit: &RidgeFit, d: &DesignMatrix) -> Result<Vec<f64>> {
    let dof = d.n() as i64 - d.p() as i64 - 1;
    if dof < 1 {
        return Err(Error::InsufficientSamples {
            n: d.n(),
            p: d.p(),
            dof,
        });
    }
    let (ss_res, _) = sums_of_squares(fit, d);
    let sigma2 = ss_res / dof as f64;
    let eq = normal_equations(d);
    let inv = factor(&eq.gram, fit.alpha)?.inverse();
    let sandwich = &inv * &eq.gram * &inv;
    Ok((0..d.p())
        .map(|j| (sigma2 * sandwich[(j, j)].max(0.0)).sqrt())
        .collect())
}

/// `b_j / SE_j`; a zero SE gives 0 for a zero coefficient and a signed
/// infinity otherwise.
pub fn t_values(fit: &RidgeFit, se: &[f64]) -> Vec<f64> {
    fit.coefficients
        .iter()
        .zip(se)
        .map(|(&b, &s)| {
            if s > 0.0 {
                b / s
            } else if b == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(b)
            }
        })
        .collect()
}

/// Standard error of each feature-mean column, `s / sqrt(n)` with the
/// sample standard deviation `s`.
pub fn feature_mean_standard_errors(d: &DesignMatrix) -> Vec<f64> {
    let n = d.n() as f64;
    let means = d.column_means();
    let mut ss = vec![0f64; d.p()];
    for i in 0..d.n() {
        for ((s, v), m) in ss.iter_mut().zip(d.row(i)).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    ss.into_iter().map(|s| (s / (n - 1.0)).sqrt() / n.sqrt()).collect()
}

pub const FLAG_INSUFFICIENT_SAMPLES: &str = "insufficient_samples";
pub const FLAG_DEGENERATE_TARGET: &str = "degenerate_target";
pub const FLAG_INFINITE_T: &str = "infinite_t";

/// Everything reported about one tap's fit. Statistics that cannot be
/// computed are `None`, with the reason in `flags`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub r_squared: Option<f64>,
    pub r_squared_raw: Option<f64>,
    pub residual_fraction: Option<f64>,
    pub se: Option<Vec<f64>>,
    pub t_values: Option<Vec<f64>>,
    pub p_values: Option<Vec<f64>>,
    pub dof: i64,
    pub residual_variance: Option<f64>,
    pub feature_mean_se: Vec<f64>,
    pub flags: Vec<String>,
}

impl Diagnostics {
    pub fn insufficient_samples(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_INSUFFICIENT_SAMPLES)
    }
}

pub fn diagnose(fit: &RidgeFit, d: &DesignMatrix) -> Result<Diagnostics> {
    let dof = d.n() as i64 - d.p() as i64 - 1;
    let mut flags = Vec::new();
    let (r2_raw, r2, fraction) = match r_squared(fit, d) {
        Ok((raw, clamped)) => (Some(raw), Some(clamped), Some(1.0 - raw)),
        Err(Error::DegenerateTarget) => {
            flags.push(FLAG_DEGENERATE_TARGET.to_string());
            (None, None, None)
        }
        Err(e) => return Err(e),
    };
    let (se, t, p, sigma2) = if dof < 1 {
        flags.push(FLAG_INSUFFICIENT_SAMPLES.to_string());
        (None, None, None, None)
    } else {
        let se = coefficient_standard_errors(fit, d)?;
        let t = t_values(fit, &se);
        if t.iter().any(|v| v.is_infinite()) {
            flags.push(FLAG_INFINITE_T.to_string());
        }
        let p = t.iter().map(|&v| student_t_two_sided(v, dof as u64)).collect();
        let (ss_res, _) = sums_of_squares(fit, d);
        (Some(se), Some(t), Some(p), Some(ss_res / dof as f64))
    };
    Ok(Diagnostics {
        r_squared: r2,
        r_squared_raw: r2_raw,
        residual_fraction: fraction,
        se,
        t_values: t,
        p_values: p,
        dof,
        residual_variance: sigma2,
        feature_mean_se: feature_mean_standard_errors(d),
        flags,
    })
}
