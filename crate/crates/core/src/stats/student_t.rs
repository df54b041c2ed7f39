use statrs::function::beta::beta_reg;

/// Two-sided tail probability `2 P(T_dof > |t|)` of Student's t.
///
/// Uses `I_x(dof/2, 1/2)` with `x = dof / (dof + t^2)`, the regularised
/// incomplete beta function, evaluated by continued fraction.
pub fn student_t_two_sided(t: f64, dof: u64) -> f64 {
    assert!(dof >= 1, "Student t needs at least one degree of freedom");
    if t == 0.0 {
        return 1.0;
    }
    if t.is_nan() {
        return f64::NAN;
    }
    let nu = dof as f64;
    let t2 = t * t;
    if !t2.is_finite() {
        return 0.0;
    }
    let x = nu / (nu + t2);
    beta_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}
