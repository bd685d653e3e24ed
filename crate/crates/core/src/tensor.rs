//! Dense f32 kernels for the encoder.
//!
//! Matrices are row-major slices. Strided views let attention address one
//! head of a `[rows, d_model]` buffer without copying.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + cols)` of rows `[row0, row0 + rows)` of a
    /// row-major matrix with `stride` columns.
    pub fn block(data: &'a [f32], stride: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        Self {
            data,
            offset: row0 * stride + col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [f32], stride: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        Self {
            data,
            offset: row0 * stride + col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // empty reduction; sgemm is still defined but skip the call
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is the unique mutable borrow of its buffer.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[rows, n] = x[rows, k] @ w[k, n] + bias`.
pub fn linear(x: &[f32], rows: usize, w: &Tensor, bias: &Tensor, out: &mut [f32]) {
    let (k, n) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * k);
    for r in out.chunks_exact_mut(n) {
        r.copy_from_slice(&bias.data);
    }
    gemm(1.0, MatRef::new(x, rows, k), MatRef::new(&w.data, k, n), 1.0, MatMut::new(out, rows, n));
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += sum(dy)` and, when
/// requested, writes `dx = dy @ w^T`.
pub fn linear_backward(
    x: &[f32],
    rows: usize,
    w: &Tensor,
    dy: &[f32],
    dw: &mut Tensor,
    db: &mut Tensor,
    dx: Option<&mut [f32]>,
) {
    let (k, n) = (w.shape[0], w.shape[1]);
    gemm(
        1.0,
        MatRef::new(x, rows, k).t(),
        MatRef::new(dy, rows, n),
        1.0,
        MatMut::new(&mut dw.data, k, n),
    );
    for r in dy.chunks_exact(n) {
        for (b, g) in db.data.iter_mut().zip(r) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        gemm(
            1.0,
            MatRef::new(dy, rows, n),
            MatRef::new(&w.data, k, n).t(),
            0.0,
            MatMut::new(dx, rows, k),
        );
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Writes the normalized input (`xhat`) and `1/std` per
/// row when a cache is supplied.
pub fn layer_norm(
    x: &[f32],
    d: usize,
    gamma: &Tensor,
    beta: &Tensor,
    out: &mut [f32],
    mut cache: Option<(&mut [f32], &mut [f32])>,
) {
    for (i, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            let xh = (xr[j] - mean) * rstd;
            yr[j] = xh * gamma.data[j] + beta.data[j];
            if let Some((xhat, _)) = cache.as_mut() {
                xhat[i * d + j] = xh;
            }
        }
        if let Some((_, rs)) = cache.as_mut() {
            rs[i] = rstd;
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`.
pub fn layer_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    d: usize,
    gamma: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
    dx: &mut [f32],
) {
    let mut dxhat = vec![0.0f32; d];
    for (i, (dyr, xr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        let mut sum = 0.0f32;
        let mut sum_x = 0.0f32;
        for j in 0..d {
            dgamma.data[j] += dyr[j] * xr[j];
            dbeta.data[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma.data[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xr[j];
        }
        let mean = sum / d as f32;
        let mean_x = sum_x / d as f32;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxr[j] += rstd[i] * (dxhat[j] - mean - xr[j] * mean_x);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// `exp(x)` by range reduction and a degree-6 polynomial, accurate to a few
/// ulp. Branch-free so loops over it vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    // the low mantissa bits of `shifted` hold n + 2^22
    let scale = f32::from_bits((shifted.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127)) << 23);
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    e * scale
}

#[inline(always)]
fn gelu_sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-2.0 * GELU_C * (x + 0.044715 * x * x * x)))
}

/// Tanh-approximated GELU, written as `x * sigmoid(2y)` which equals
/// `0.5 x (1 + tanh(y))`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    x * gelu_sigmoid(x)
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let s = gelu_sigmoid(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax of each row of a `[rows, n]` buffer.
pub fn softmax_rows(x: &mut [f32], n: usize) {
    for r in x.chunks_exact_mut(n) {
        let max = max_lanes(r);
        for v in r.iter_mut() {
            *v = fast_exp(*v - max);
        }
        let inv = 1.0 / sum_lanes(r);
        r.iter_mut().for_each(|v| *v *= inv);
    }
}

fn max_lanes(x: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    acc.iter().chain(tail).copied().fold(f32::NEG_INFINITY, f32::max)
}

/// Sum with eight fixed partial accumulators (vectorizable, deterministic).
pub fn sum_lanes(x: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().sum::<f32>() + tail.iter().sum::<f32>()
}

/// `log(sum(exp(row)))`, computed stably.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}
