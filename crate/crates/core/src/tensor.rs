//! Dense row-major f32 tensors and the handful of ops the runtime needs.
//!
//! Everything here is scalar code with a fixed accumulation order
//! (left-to-right over the contraction index), so repeated runs on the same
//! machine produce identical bits. Public ops reject non-finite values; a
//! tensor that came out of this module holds finite data only.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from row-major data. The element count must match the
    /// shape product and every value must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 {
            return Err(Error::EmptyInput("Tensor::from_vec"));
        }
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension: columns of a matrix, length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn set_row(&mut self, i: usize, values: &[f32]) {
        self.row_mut(i).copy_from_slice(values);
    }
}

// --- core ops ---------------------------------------------------------------

/// Matrix product of an n x k and a k x m tensor. Rank-1 left operands are
/// treated as 1 x k. Accumulation runs over k in ascending order for every
/// output element, so the result is reproducible bit for bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ka) = match a.shape() {
        [k] => (1, *k),
        [n, k] => (*n, *k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    };
    let (kb, m) = match b.shape() {
        [k, m] => (*k, *m),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }

    let mut out = vec![0.0f32; n * m];
    // i-k-j loop order: adds arrive at out[i*m + j] with k ascending, the
    // same order as the textbook i-j-k triple loop.
    for i in 0..n {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    }
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("matmul"));
    }
    let shape = if a.rank() == 1 { vec![m] } else { vec![n, m] };
    Ok(Tensor {
        shape,
        data: out,
    })
}

/// Numerically stable softmax over a rank-1 tensor.
pub fn softmax_row(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax_row",
            left: x.shape().to_vec(),
            right: vec![],
        });
    }
    let mut out = x.data.clone();
    softmax_in_place(&mut out);
    Tensor::from_vec(x.shape(), out)
}

/// In-place stable softmax on a score buffer. Callers guarantee a non-empty
/// slice of finite values.
pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    // the denominator accumulates in f64: over a hundred or so terms an f32
    // running sum drifts enough that the row stops summing to 1 within 1e-6
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let denom = sum as f32;
    for x in xs.iter_mut() {
        *x /= denom;
    }
}

/// Layer normalization of each row of `x` with elementwise gain and bias:
/// (x - mean) / sqrt(var + eps) * gain + bias, population variance.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gain.rank() != 1 || bias.rank() != 1 || gain.cols() != d || bias.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::NonFinite("layernorm eps"));
    }
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        layernorm_slice(x.row(i), gain.data(), bias.data(), eps, out.row_mut(i));
    }
    if !out.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("layernorm"));
    }
    Ok(out)
}

pub(crate) fn layernorm_slice(x: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var_sum = 0.0f32;
    for &v in x {
        let dv = v - mean;
        var_sum += dv * dv;
    }
    let inv_std = 1.0 / (var_sum / n + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
}

/// Column-wise mean over the rows of a rank-2 tensor, yielding a 1 x d tensor.
/// Each output column sums its inputs top to bottom before dividing.
pub fn mean_pool_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mean_pool_rows",
            left: x.shape().to_vec(),
            right: vec![],
        });
    }
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f32;
    }
    Tensor::from_vec(&[1, d], out)
}

/// Sum of absolute values over all elements.
pub fn l1_norm(x: &Tensor) -> f32 {
    l1_slice(x.data())
}

pub(crate) fn l1_slice(xs: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for &v in xs {
        s += v.abs();
    }
    s
}
