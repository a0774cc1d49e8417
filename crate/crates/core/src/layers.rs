//! Differentiable layer primitives with explicit forward/backward pairs.
//!
//! Forward functions return the output together with whatever the matching
//! backward call needs. Backward functions take the upstream gradient
//! (cotangent) and return gradients for the layer inputs and parameters.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NcartError, Result};
use crate::matrix::Matrix;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_fwd(x: &Matrix) -> Matrix {
    x.map(sigmoid)
}

/// Gradient of the sigmoid given its forward *output*.
pub fn sigmoid_bwd(out: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    same_shape("sigmoid_bwd", out, d_out)?;
    let mut d = d_out.clone();
    for (g, &s) in d.as_mut_slice().iter_mut().zip(out.as_slice()) {
        *g *= s * (1.0 - s);
    }
    Ok(d)
}

pub fn relu_fwd(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its forward *input*. The subgradient at 0 is 0.
pub fn relu_bwd(input: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    same_shape("relu_bwd", input, d_out)?;
    let mut d = d_out.clone();
    for (g, &x) in d.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(d)
}

/// Adds `bias` to every row.
pub fn bias_add_fwd(x: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols() != bias.len() {
        return Err(shape_err("bias_add_fwd", x.cols(), bias.len()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Returns `(d_x, d_bias)`.
pub fn bias_add_bwd(d_out: &Matrix) -> (Matrix, Vec<f64>) {
    (d_out.clone(), d_out.col_sums())
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine batch normalization over the rows of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved normalized activations and inverse standard deviations.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the running statistics.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let n = self.features();
        if n == 0 {
            return Err(NcartError::InvalidInput("batch norm over zero features".into()));
        }
        if x.cols() != n {
            return Err(shape_err("batchnorm_fwd", n, x.cols()));
        }
        let scale: Vec<f64> = (0..n)
            .map(|j| self.gamma[j] / (self.running_var[j] + self.eps).sqrt())
            .collect();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) * scale[j] + self.beta[j];
            }
        }
        Ok(out)
    }

    /// In train mode the batch statistics (biased variance) normalize the
    /// batch and are blended into the running statistics; eval mode uses the
    /// running statistics only and leaves the state untouched.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Option<BatchNormCache>)> {
        let n = self.features();
        if n == 0 {
            return Err(NcartError::InvalidInput("batch norm over zero features".into()));
        }
        if x.cols() != n {
            return Err(shape_err("batchnorm_fwd", n, x.cols()));
        }
        match mode {
            Mode::Eval => Ok((self.eval(x)?, None)),
            Mode::Train => {
                let m = x.rows();
                if m < 2 {
                    return Err(NcartError::InvalidInput(format!(
                        "train-mode batch norm needs at least 2 rows, got {m}"
                    )));
                }
                let (mean, var) = column_moments(x);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let mut x_hat = x.clone();
                let mut out = Matrix::zeros(m, n);
                for r in 0..m {
                    let xh = x_hat.row_mut(r);
                    for j in 0..n {
                        xh[j] = (xh[j] - mean[j]) * inv_std[j];
                    }
                    let o = out.row_mut(r);
                    for j in 0..n {
                        o[j] = self.gamma[j] * xh[j] + self.beta[j];
                    }
                }
                for j in 0..n {
                    self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                    self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
                }
                Ok((out, Some(BatchNormCache { x_hat, inv_std })))
            }
        }
    }
}

/// Returns `(d_x, d_gamma, d_beta)` for a train-mode forward pass.
pub fn batchnorm_bwd(
    state: &BatchNormState,
    cache: &BatchNormCache,
    d_out: &Matrix,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    same_shape("batchnorm_bwd", &cache.x_hat, d_out)?;
    let (m, n) = d_out.shape();
    let mut d_gamma = vec![0.0; n];
    let mut d_beta = vec![0.0; n];
    for r in 0..m {
        let g = d_out.row(r);
        let xh = cache.x_hat.row(r);
        for j in 0..n {
            d_beta[j] += g[j];
            d_gamma[j] += g[j] * xh[j];
        }
    }
    let inv_m = 1.0 / m as f64;
    let mut d_x = Matrix::zeros(m, n);
    for r in 0..m {
        let g = d_out.row(r);
        let xh = cache.x_hat.row(r);
        let dx = d_x.row_mut(r);
        for j in 0..n {
            dx[j] = state.gamma[j] * cache.inv_std[j] * (g[j] - inv_m * d_beta[j] - xh[j] * inv_m * d_gamma[j]);
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Per-column mean and biased (1/M) variance.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = x.shape();
    let inv_m = 1.0 / m as f64;
    let mut mean = x.col_sums();
    mean.iter_mut().for_each(|v| *v *= inv_m);
    let mut var = vec![0.0; n];
    for r in 0..m {
        for (j, v) in x.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_m);
    (mean, var)
}

/// Row-wise softmax.
pub fn softmax_fwd(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax Jacobian-vector product given the forward output.
pub fn softmax_bwd(probs: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    same_shape("softmax_bwd", probs, d_out)?;
    let mut d = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = d_out.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (j, v) in d.row_mut(r).iter_mut().enumerate() {
            *v = p[j] * (g[j] - inner);
        }
    }
    Ok(d)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(shape_err("cross_entropy", logits.rows(), targets.len()));
    }
    let k = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(NcartError::InvalidInput(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    let m = logits.rows() as f64;
    let mut grad = softmax_fwd(logits);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(r);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v /= m);
    }
    Ok((loss / m, grad))
}

/// Mean over all entries of the squared residual, with its gradient.
pub fn mse_loss(pred: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    same_shape("mse_loss", pred, targets)?;
    let count = pred.as_slice().len();
    if count == 0 {
        return Err(NcartError::InvalidInput("mse over an empty batch".into()));
    }
    let scale = 1.0 / count as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(targets.as_slice()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d * scale;
    }
    Ok((loss * scale, grad))
}
