//! Dense tensor storage, matrix multiply, conv-as-matmul lowering, and SVD.
//!
//! Everything here is a pure function of its inputs: no shared mutable
//! state, safe to call concurrently. All math runs in f64; checkpoint
//! serialization narrows to f32 at the I/O boundary.

mod svd;

pub use svd::{svd, truncated_split, SvdResult};

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major dense tensor of f64 values.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// 2-D helper: `rows x cols` from a closure over (row, col).
    pub fn from_fn_2d(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn_2d(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_raw(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// 2-D transpose.
    pub fn transposed(&self) -> Tensor {
        debug_assert_eq!(self.ndim(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        Tensor::from_fn_2d(c, r, |i, j| self.data[j * c + i])
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "sub: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Fallback to the sequential path below this many output elements; the
/// rayon split overhead is not worth it for small products.
#[cfg(feature = "parallel")]
const PAR_MIN_OUTPUT: usize = 64 * 64;

fn matmul_check(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions differ for {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.rows(), a.cols(), b.cols()))
}

fn matmul_rows(out_rows: &mut [f64], a_rows: &[f64], b: &Tensor, k: usize, n: usize) {
    // i-k-j loop order: each output element accumulates over k in ascending
    // order, which keeps the summation order identical to the naive triple
    // loop and bitwise reproducible across runs and thread counts.
    for (out_row, a_row) in out_rows.chunks_mut(n).zip(a_rows.chunks(k)) {
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Sequential matrix product. Public so the benchmark suite can compare it
/// against [`matmul_par`]; prefer [`matmul`] everywhere else.
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_check(a, b)?;
    let mut out = Tensor::zeros(&[m, n]);
    matmul_rows(&mut out.data, &a.data, b, k, n);
    Ok(out)
}

/// Row-parallel matrix product. Rows are independent, so the result is
/// bitwise identical to [`matmul_seq`] for any thread count.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_check(a, b)?;
    let mut out = Tensor::zeros(&[m, n]);
    let chunk = (m / (4 * rayon::current_num_threads())).max(1);
    out.data
        .par_chunks_mut(chunk * n)
        .zip(a.data.par_chunks(chunk * k))
        .for_each(|(out_rows, a_rows)| matmul_rows(out_rows, a_rows, b, k, n));
    Ok(out)
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    #[cfg(feature = "parallel")]
    {
        if a.rows() > 1 && a.rows().saturating_mul(b.cols()) >= PAR_MIN_OUTPUT {
            return matmul_par(a, b);
        }
    }
    matmul_seq(a, b)
}

/// Unrolls a 4-D conv weight of shape `(c_in, c_out, k, k)` into the 2-D
/// matrix `(c_in * k * k, c_out)` whose column j is the vectorized filter j.
///
/// Vectorization order is fixed: input channel major, then kernel row, then
/// kernel column; row index = `ci * k * k + kr * k + kc`. [`roll_conv_weight`]
/// is the exact inverse.
pub fn unroll_conv_weight(w: &Tensor) -> Result<Tensor> {
    if w.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "unroll_conv_weight expects a 4-D weight, got {:?}",
            w.shape()
        )));
    }
    let (c_in, c_out, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if kh != kw {
        return Err(Error::Dimension(format!(
            "unroll_conv_weight expects square kernels, got {:?}",
            w.shape()
        )));
    }
    let k = kh;
    let mut out = Tensor::zeros(&[c_in * k * k, c_out]);
    for ci in 0..c_in {
        for co in 0..c_out {
            for kr in 0..k {
                for kc in 0..k {
                    let src = ((ci * c_out + co) * k + kr) * k + kc;
                    let dst = (ci * k * k + kr * k + kc) * c_out + co;
                    out.data[dst] = w.data[src];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`unroll_conv_weight`]: `(c_in * k * k, c_out)` back to
/// `(c_in, c_out, k, k)`. `k` must be supplied because it is not recoverable
/// from the matrix shape alone.
pub fn roll_conv_weight(m: &Tensor, c_in: usize, k: usize) -> Result<Tensor> {
    if m.ndim() != 2 || m.rows() != c_in * k * k {
        return Err(Error::Dimension(format!(
            "roll_conv_weight: {:?} does not match c_in={} k={}",
            m.shape(),
            c_in,
            k
        )));
    }
    let c_out = m.cols();
    let mut out = Tensor::zeros(&[c_in, c_out, k, k]);
    for ci in 0..c_in {
        for co in 0..c_out {
            for kr in 0..k {
                for kc in 0..k {
                    let dst = ((ci * c_out + co) * k + kr) * k + kc;
                    let src = (ci * k * k + kr * k + kc) * c_out + co;
                    out.data[dst] = m.data[src];
                }
            }
        }
    }
    Ok(out)
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Dimension(format!(
            "conv output degenerate: input {} kernel {} pad {}",
            input, k, pad
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Lowers a `(c_in, H, W)` input into the `(c_in * k * k, H_out * W_out)`
/// patch matrix so that convolution becomes `matmul(unrolled_w^T, cols)`.
///
/// Row order matches [`unroll_conv_weight`]; column p corresponds to output
/// position `(p / W_out, p % W_out)`. Padding contributes zeros.
pub fn im2col(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::Dimension(format!(
            "im2col expects a (c_in, H, W) input, got {:?}",
            input.shape()
        )));
    }
    if k == 0 || stride == 0 {
        return Err(Error::Argument("im2col: k and stride must be >= 1".into()));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let h_out = conv_out_dim(h, k, stride, pad)?;
    let w_out = conv_out_dim(w, k, stride, pad)?;
    let positions = h_out * w_out;
    let mut out = Tensor::zeros(&[c_in * k * k, positions]);
    for ci in 0..c_in {
        let plane = &input.data[ci * h * w..(ci + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k * k + kr * k + kc) * positions;
                for oy in 0..h_out {
                    let iy = (oy * stride + kr) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kc) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out.data[row + oy * w_out + ox] = plane[base + ix as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatter-add inverse of [`im2col`], used by the convolution backward pass.
pub fn col2im(
    cols: &Tensor,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let h_out = conv_out_dim(h, k, stride, pad)?;
    let w_out = conv_out_dim(w, k, stride, pad)?;
    let positions = h_out * w_out;
    if cols.shape() != [c_in * k * k, positions] {
        return Err(Error::Dimension(format!(
            "col2im: got {:?}, expected [{}, {}]",
            cols.shape(),
            c_in * k * k,
            positions
        )));
    }
    let mut out = Tensor::zeros(&[c_in, h, w]);
    for ci in 0..c_in {
        let plane = ci * h * w;
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k * k + kr * k + kc) * positions;
                for oy in 0..h_out {
                    let iy = (oy * stride + kr) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kc) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out.data[base + ix as usize] += cols.data[row + oy * w_out + ox];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
