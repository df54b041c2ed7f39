//! Reference implementations used as test oracles. They are written for
//! clarity, not speed, and share no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Textbook convolution over a zero-padded input, all in `f64`.
///
/// `input` is `(c, h, w)`, `weights` is `(o, c, kh, kw)`; returns `(o, oh, ow)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    weights: &[f32],
    (o, kh, kw): (usize, usize, usize),
    bias: &[f32],
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0f64; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc] as f64;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = input[ic * h * w + iy as usize * w + ix as usize] as f64;
                            let k = weights[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                            acc += v * k;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0f64; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Ridge objective `sum (y - b0 - x.b)^2 + alpha |b|^2` with the intercept
/// as an explicit, unpenalised unknown: returns `[b0, b1, ..., bp]`.
pub fn ridge_brute_force(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0f64; p + 1]; p + 1];
    let mut rhs = vec![0f64; p + 1];
    for (row, &yi) in x.iter().zip(y) {
        let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..=p {
            rhs[i] += z[i] * yi;
            for j in 0..=p {
                a[i][j] += z[i] * z[j];
            }
        }
    }
    for (j, row) in a.iter_mut().enumerate().skip(1) {
        row[j] += alpha;
    }
    gauss_solve(a, rhs)
}

/// Minimises the same objective by conjugate gradients on its gradient,
/// without forming or factoring the normal matrix.
pub fn ridge_iterative(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Vec<f64> {
    let p = x[0].len();
    let hess_times = |v: &[f64]| -> Vec<f64> {
        // H v where H = Z'Z + diag(0, alpha, ..., alpha), applied row by row.
        let mut out = vec![0f64; p + 1];
        for row in x {
            let zv = v[0] + row.iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>();
            out[0] += zv;
            for j in 0..p {
                out[j + 1] += row[j] * zv;
            }
        }
        for j in 1..=p {
            out[j] += alpha * v[j];
        }
        out
    };
    let grad = |b: &[f64]| -> Vec<f64> {
        let hb = hess_times(b);
        let mut zy = vec![0f64; p + 1];
        for (row, &yi) in x.iter().zip(y) {
            zy[0] += yi;
            for j in 0..p {
                zy[j + 1] += row[j] * yi;
            }
        }
        hb.iter().zip(&zy).map(|(h, z)| h - z).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut b = vec![0f64; p + 1];
    for _restart in 0..20 {
        let mut r: Vec<f64> = grad(&b).iter().map(|g| -g).collect();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        if rr.sqrt() < 1e-14 {
            break;
        }
        for _ in 0..=p {
            let hd = hess_times(&d);
            let step = rr / dot(&d, &hd);
            for j in 0..=p {
                b[j] += step * d[j];
                r[j] -= step * hd[j];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() < 1e-14 {
                break;
            }
            let beta = rr_new / rr;
            for j in 0..=p {
                d[j] = r[j] + beta * d[j];
            }
            rr = rr_new;
        }
    }
    b
}

/// Two-sided Student-t tail by Simpson integration of the density.
pub fn t_tail_quadrature(t: f64, dof: f64) -> f64 {
    let ln_c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp();
    let t = t.abs();
    let steps = 20_000;
    let h = t / steps as f64;
    let mut s = pdf(0.0) + pdf(t);
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Lanczos approximation of `ln Gamma(x)`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

/// Random `n x p` design with a linear signal plus noise.
pub fn random_regression(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|row| 0.3 + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.5..0.5))
        .collect();
    (x, y)
}
