//! Minimal dense numeric kernels everything else builds on: matrix multiply,
//! valid 2-D convolution, softmax, elementwise nonlinearities.
//!
//! All values are 32-bit reals. Accumulation order is fixed (row-major,
//! index-ascending) so that the batch and streaming inference paths produce
//! bit-identical results.

use crate::error::{KwsError, Result};

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(KwsError::Dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KwsError::Dim(format!(
                "shape {shape:?} expects {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(KwsError::Dim(format!(
                "cannot reshape {} values into {shape:?}",
                self.data.len()
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Element accessor for tests and small call sites; not for hot loops.
    pub fn at(&self, idx: &[usize]) -> f32 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        self.data[off]
    }

    pub(crate) fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(KwsError::NonFinite(ctx.to_string()))
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// out = a (m x k) * b (k x n), overwriting out. For every output element the
/// sum over k runs in ascending order.
pub(crate) fn mm(out: &mut [f32], a: &[f32], m: usize, k: usize, b: &[f32], n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    mm_acc(out, a, m, k, b, n);
}

/// out += a * b with the same ordering contract as [`mm`].
pub(crate) fn mm_acc(out: &mut [f32], a: &[f32], m: usize, k: usize, b: &[f32], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a (m x k) * b^T where b is (n x k). Dot products run k-ascending.
pub(crate) fn mm_bt(out: &mut [f32], a: &[f32], m: usize, k: usize, b: &[f32], n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(KwsError::Dim(format!(
            "matmul expects rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(KwsError::Dim(format!(
            "matmul inner extents differ: {k} vs {k2}"
        )));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    mm(out.data_mut(), a.data(), m, k, b.data(), n);
    out.check_finite("matmul output")?;
    Ok(out)
}

/// One output time column of a valid 2-D convolution.
///
/// `window` holds `k_t` input columns in time order, each of length
/// `f_in * c_in`. The output column has length `f_out * c_out` with
/// `f_out = (f_in - k_f) / s_f + 1`. Kernel layout is
/// `[k_t][k_f][c_in][c_out]`. For a fixed output element the accumulation
/// runs over (k_t, k_f, c_in) ascending; the batch and streaming paths both
/// call this function, which is what makes them bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_time_column(
    window: &[&[f32]],
    f_in: usize,
    c_in: usize,
    kernel: &[f32],
    k_t: usize,
    k_f: usize,
    c_out: usize,
    s_f: usize,
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let f_out = (f_in - k_f) / s_f + 1;
    debug_assert_eq!(window.len(), k_t);
    debug_assert_eq!(out.len(), f_out * c_out);
    for of in 0..f_out {
        let orow = &mut out[of * c_out..(of + 1) * c_out];
        match bias {
            Some(b) => orow.copy_from_slice(b),
            None => orow.fill(0.0),
        }
        for (kt, col) in window.iter().enumerate() {
            for kf in 0..k_f {
                let ibase = (of * s_f + kf) * c_in;
                let kbase = (kt * k_f + kf) * c_in * c_out;
                for ci in 0..c_in {
                    let x = col[ibase + ci];
                    let krow = &kernel[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += x * kv;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) 2-D convolution in the cross-correlation convention.
///
/// Input is `t x f x c_in`, kernel is `k_t x k_f x c_in x c_out`, output is
/// `t_out x f_out x c_out` with `t_out = (t - k_t)/s_t + 1` and `f_out`
/// likewise. `bias`, when given, is one value per output channel.
pub fn conv2d_valid(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(KwsError::Dim(format!(
            "conv2d expects t x f x c input and k_t x k_f x c_in x c_out kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (t, f, c_in) = (input.dim(0), input.dim(1), input.dim(2));
    let (k_t, k_f, kc_in, c_out) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    let (s_t, s_f) = stride;
    if kc_in != c_in {
        return Err(KwsError::Dim(format!(
            "conv2d channel mismatch: input has {c_in}, kernel expects {kc_in}"
        )));
    }
    if k_t > t || k_f > f {
        return Err(KwsError::Dim(format!(
            "conv2d kernel {k_t}x{k_f} larger than input {t}x{f}"
        )));
    }
    if s_t == 0 || s_f == 0 {
        return Err(KwsError::Dim("conv2d stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(KwsError::Dim(format!(
                "conv2d bias length {} != c_out {c_out}",
                b.len()
            )));
        }
    }
    let t_out = (t - k_t) / s_t + 1;
    let f_out = (f - k_f) / s_f + 1;
    let mut out = Tensor::zeros(vec![t_out, f_out, c_out]);
    let colw = f * c_in;
    let ocolw = f_out * c_out;
    let mut window: Vec<&[f32]> = Vec::with_capacity(k_t);
    for ot in 0..t_out {
        window.clear();
        for kt in 0..k_t {
            let ti = ot * s_t + kt;
            window.push(&input.data()[ti * colw..(ti + 1) * colw]);
        }
        conv_time_column(
            &window,
            f,
            c_in,
            kernel.data(),
            k_t,
            k_f,
            c_out,
            s_f,
            bias,
            &mut out.data_mut()[ot * ocolw..(ot + 1) * ocolw],
        );
    }
    out.check_finite("conv2d output")?;
    Ok(out)
}

pub(crate) fn softmax_rows_inplace(data: &mut [f32], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Softmax along the last axis, stabilized by max subtraction. Each last-axis
/// slice of the result sums to 1.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let cols = *x
        .shape()
        .last()
        .ok_or_else(|| KwsError::Dim("softmax on rank-0 tensor".into()))?;
    let rows = x.len() / cols;
    let mut out = x.clone();
    softmax_rows_inplace(out.data_mut(), rows, cols);
    Ok(out)
}
