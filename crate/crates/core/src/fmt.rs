/// Shortest decimal text that parses back to the same `f64`.
///
/// Plain notation for ordinary magnitudes, scientific notation for very
/// small or very large ones so output stays compact.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && v.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}
