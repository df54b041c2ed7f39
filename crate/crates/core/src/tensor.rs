//! Dense rank-4 tensors in `(n, c, h, w)` layout and the inference kernels
//! that run over them.
//!
//! Every reduction accumulates in `f64` in a fixed order and rounds to `f32`
//! once at the end, so kernel outputs are bit-identical across runs and
//! thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the length, that every dim is at least one,
    /// and that all values are finite.
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f32) -> Self {
        assert!(shape.len() > 0, "zero-sized tensor {shape}");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    /// Row-major `h * w` view of one feature map.
    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape4::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * samples.len());
        for t in samples {
            if t.shape != s {
                return Err(Error::shape(format!("cannot stack {} with {}", t.shape, s)));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape4::new(s.n * samples.len(), s.c, s.h, s.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn checked(shape: Shape4, data: Vec<f32>, what: &str) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} output")));
        }
        Ok(Tensor { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(c_out, c_in, k_h, k_w)`.
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvParams {
    pub fn new(
        weights: Tensor,
        bias: Vec<f32>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if bias.len() != weights.shape().n {
            return Err(Error::shape(format!(
                "bias length {} != {} output channels",
                bias.len(),
                weights.shape().n
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape().h, self.weights.shape().w)
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        conv_output_hw((h, w), (kh, kw), self.stride, self.padding)
    }
}

pub(crate) fn conv_output_hw(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    if kh > hp || kw > wp {
        return Err(Error::shape(format!(
            "{kh}x{kw} kernel does not fit padded {hp}x{wp} input"
        )));
    }
    Ok(((hp - kh) / sh + 1, (wp - kw) / sw + 1))
}

/// Number of output channels blocked together in the convolution inner loop.
const CONV_OUT_BLOCK: usize = 4;

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let s = input.shape();
    if s.c != params.in_channels() {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {}",
            params.in_channels(),
            s.c
        )));
    }
    let (kh, kw) = params.kernel();
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let (oh, ow) = params.output_hw(s.h, s.w)?;
    let c_out = params.out_channels();
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let out_shape = Shape4::new(s.n, c_out, oh, ow);
    let oplane = oh * ow;
    let weights = params.weights.data();
    let wstride = s.c * kh * kw;

    let mut out = vec![0f32; out_shape.len()];
    let mut padded = vec![0f32; s.c * hp * wp];
    let mut acc = vec![0f64; CONV_OUT_BLOCK * oplane];

    for n in 0..s.n {
        for i in 0..s.c {
            let src = input.channel(n, i);
            let dst = &mut padded[i * hp * wp..(i + 1) * hp * wp];
            for y in 0..s.h {
                let row = (y + ph) * wp + pw;
                dst[row..row + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }

        for o0 in (0..c_out).step_by(CONV_OUT_BLOCK) {
            let block = CONV_OUT_BLOCK.min(c_out - o0);
            acc[..block * oplane].iter_mut().for_each(|a| *a = 0.0);
            // Each output cell sees its terms in (i, dy, dx) order.
            for i in 0..s.c {
                let plane = &padded[i * hp * wp..(i + 1) * hp * wp];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut wv = [0f64; CONV_OUT_BLOCK];
                        for (b, wb) in wv.iter_mut().enumerate().take(block) {
                            *wb = weights[(o0 + b) * wstride + (i * kh + dy) * kw + dx] as f64;
                        }
                        for y in 0..oh {
                            let row = &plane[(y * sh + dy) * wp + dx..];
                            if block == CONV_OUT_BLOCK {
                                let (a0, rest) = acc.split_at_mut(oplane);
                                let (a1, rest) = rest.split_at_mut(oplane);
                                let (a2, a3) = rest.split_at_mut(oplane);
                                let r = y * ow..(y + 1) * ow;
                                accumulate4(
                                    [&mut a0[r.clone()], &mut a1[r.clone()], &mut a2[r.clone()], &mut a3[r]],
                                    row,
                                    sw,
                                    wv,
                                );
                            } else {
                                for b in 0..block {
                                    let a = &mut acc[b * oplane + y * ow..b * oplane + (y + 1) * ow];
                                    for (x, slot) in a.iter_mut().enumerate() {
                                        *slot += row[x * sw] as f64 * wv[b];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for b in 0..block {
                let o = o0 + b;
                let bias = params.bias[o] as f64;
                let dst = &mut out[(n * c_out + o) * oplane..(n * c_out + o + 1) * oplane];
                for (d, a) in dst.iter_mut().zip(&acc[b * oplane..(b + 1) * oplane]) {
                    *d = (bias + *a) as f32;
                }
            }
        }
    }
    Tensor::checked(out_shape, out, "conv2d")
}

#[inline(always)]
fn accumulate4(acc: [&mut [f64]; 4], row: &[f32], stride: usize, w: [f64; 4]) {
    let [a0, a1, a2, a3] = acc;
    let len = a0.len();
    if stride == 1 {
        let row = &row[..len];
        for x in 0..len {
            let v = row[x] as f64;
            a0[x] += v * w[0];
            a1[x] += v * w[1];
            a2[x] += v * w[2];
            a3[x] += v * w[3];
        }
    } else {
        for x in 0..len {
            let v = row[x * stride] as f64;
            a0[x] += v * w[0];
            a1[x] += v * w[1];
            a2[x] += v * w[2];
            a3[x] += v * w[3];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// Checks equal lengths, `running_var >= 0`, `epsilon >= 0` and that every
    /// channel's `running_var + epsilon` is strictly positive.
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        epsilon: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm parameter vectors differ in length"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::shape(format!("batchnorm epsilon {epsilon} must be >= 0")));
        }
        if let Some(v) = running_var
            .iter()
            .find(|&&v| !(v >= 0.0) || !(v as f64 + epsilon as f64 > 0.0))
        {
            return Err(Error::shape(format!(
                "batchnorm running_var {v} with epsilon {epsilon} is not positive"
            )));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub fn batchnorm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let s = input.shape();
    if s.c != params.channels() {
        return Err(Error::shape(format!(
            "batchnorm has {} channels, input has {}",
            params.channels(),
            s.c
        )));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let gamma = params.gamma[c] as f64;
            let beta = params.beta[c] as f64;
            let mean = params.running_mean[c] as f64;
            let denom = (params.running_var[c] as f64 + params.epsilon as f64).sqrt();
            out.extend(
                input
                    .channel(n, c)
                    .iter()
                    .map(|&x| (gamma * (x as f64 - mean) / denom + beta) as f32),
            );
        }
    }
    debug_assert_eq!(out.len(), s.n * s.c * plane);
    Tensor::checked(s, out, "batchnorm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Ceil output-size rounding; overhanging windows are truncated.
    #[serde(default)]
    pub ceil_mode: bool,
}

impl PoolParams {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            ceil_mode: false,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape("pool kernel and stride must be at least 1"));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "{kh}x{kw} pool window does not fit {h}x{w} input"
            )));
        }
        let dim = |len: usize, k: usize, s: usize| {
            if self.ceil_mode {
                let out = (len - k).div_ceil(s) + 1;
                // The last window must start inside the input.
                if (out - 1) * s >= len {
                    out - 1
                } else {
                    out
                }
            } else {
                (len - k) / s + 1
            }
        };
        Ok((dim(h, kh, sh), dim(w, kw, sw)))
    }
}

pub fn maxpool2d(input: &Tensor, pool: &PoolParams) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = pool.output_hw(s.h, s.w)?;
    let (kh, kw) = pool.kernel;
    let (sh, sw) = pool.stride;
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.channel(n, c);
            for y in 0..oh {
                let (y0, y1) = (y * sh, (y * sh + kh).min(s.h));
                for x in 0..ow {
                    let (x0, x1) = (x * sw, (x * sw + kw).min(s.w));
                    let mut best = f32::NEG_INFINITY;
                    for yy in y0..y1 {
                        for &v in &plane[yy * s.w + x0..yy * s.w + x1] {
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Per-channel spatial mean, `n * c` values in `(n, c)` order.
pub fn global_avg_pool(input: &Tensor) -> Vec<f64> {
    let s = input.shape();
    let count = s.plane() as f64;
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut sum = 0f64;
            for &v in input.channel(n, c) {
                sum += v as f64;
            }
            out.push(sum / count);
        }
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Pre-activation of a dense unit: `bias + <weights, v>`, summed in index order.
pub fn dense_logit(v: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    if v.len() != weights.len() {
        return Err(Error::shape(format!(
            "dense layer expects {} inputs, got {}",
            weights.len(),
            v.len()
        )));
    }
    let mut dot = 0f64;
    for (a, b) in v.iter().zip(weights) {
        dot += a * b;
    }
    Ok(bias + dot)
}

pub fn dense_sigmoid(v: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    dense_logit(v, weights, bias).map(sigmoid)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "residual_add of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::checked(a.shape(), data, "residual_add")
}
