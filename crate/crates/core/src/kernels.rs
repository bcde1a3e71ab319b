//! Differentiable kernels over row-major `f64` buffers.
//!
//! Forward functions return fresh tensors; backward functions *accumulate*
//! into the gradient slices they are handed, so a buffer consumed by several
//! operators collects the sum of all contributions.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Probability floor applied before the logarithm in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `out[m×q] = a[m×p] · b[p×q]`, overwriting `out`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * q..(l + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `ga += g · bᵀ`
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for l in 0..p {
            let brow = &b[l * q..(l + 1) * q];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            ga[i * p + l] += dot;
        }
    }
}

/// `gb += aᵀ · g`
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for l in 0..p {
            let av = a[i * p + l];
            let gbrow = &mut gb[l * q..(l + 1) * q];
            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, p) = a.require_matrix("matmul")?;
    let (p2, q) = b.require_matrix("matmul")?;
    if p != p2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Tensor::zeros(&[m, q]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, p, q);
    Ok(out)
}

/// Accumulates `d(out)/d(a)` and `d(out)/d(b)` given the upstream gradient in `out.grad()`.
pub fn matmul_bwd(a: &mut Tensor, b: &mut Tensor, out: &Tensor) -> Result<(), TensorError> {
    let (m, p) = a.require_matrix("matmul_bwd")?;
    let (_, q) = b.require_matrix("matmul_bwd")?;
    if out.shape() != [m, q] {
        return Err(shape_err("matmul_bwd", a, out));
    }
    let bdata = b.data().to_vec();
    matmul_grad_lhs(out.grad(), &bdata, a.grad_mut(), m, p, q);
    let adata = a.data().to_vec();
    matmul_grad_rhs(&adata, out.grad(), b.grad_mut(), m, p, q);
    Ok(())
}

/// `y = x·W + b` for `x[m×p]`, `W[p×q]`, `b[1×q]`.
pub fn linear_into(x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    matmul_into(x, w, out, m, p, q);
    for row in out.chunks_mut(q) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Backward of [`linear_into`]. `gx` is skipped when the input does not need a gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
    m: usize,
    p: usize,
    q: usize,
) {
    if let Some(gx) = gx {
        matmul_grad_lhs(g, w, gx, m, p, q);
    }
    matmul_grad_rhs(x, g, gw, m, p, q);
    for row in g.chunks(q) {
        for (o, &v) in gb.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn linear_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, p) = x.require_matrix("linear")?;
    let (p2, q) = w.require_matrix("linear")?;
    if p != p2 {
        return Err(shape_err("linear", x, w));
    }
    if b.len() != q {
        return Err(shape_err("linear", w, b));
    }
    let mut out = Tensor::zeros(&[m, q]);
    linear_into(x.data(), w.data(), b.data(), out.data_mut(), m, p, q);
    Ok(out)
}

pub fn linear_bwd(x: &mut Tensor, w: &mut Tensor, b: &mut Tensor, out: &Tensor) -> Result<(), TensorError> {
    let (m, p) = x.require_matrix("linear_bwd")?;
    let (_, q) = w.require_matrix("linear_bwd")?;
    if out.shape() != [m, q] {
        return Err(shape_err("linear_bwd", x, out));
    }
    let wdata = w.data().to_vec();
    let (xd, xg) = x.data_and_grad_mut();
    linear_backward(xd, &wdata, out.grad(), Some(xg), w.grad_mut(), b.grad_mut(), m, p, q);
    Ok(())
}

pub fn relu_into(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// `gx += g · 1[x > 0]`
pub fn relu_backward(x: &[f64], g: &[f64], gx: &mut [f64]) {
    for ((o, &v), &gv) in gx.iter_mut().zip(x).zip(g) {
        if v > 0.0 {
            *o += gv;
        }
    }
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    relu_into(x.data(), out.data_mut());
    out
}

pub fn relu_bwd(x: &mut Tensor, out: &Tensor) {
    let (xd, xg) = x.data_and_grad_mut();
    relu_backward(xd, out.grad(), xg);
}

/// Row-wise softmax with max subtraction.
pub fn softmax_into(logits: &[f64], out: &mut [f64], cols: usize) -> Result<(), TensorError> {
    if cols == 0 {
        return Err(TensorError::Shape {
            op: "softmax",
            left: vec![logits.len(), 0],
            right: vec![1],
        });
    }
    for (row, orow) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(())
}

/// `gx += J_softmaxᵀ · g` per row: `gx_j += y_j (g_j − Σ_i g_i y_i)`.
pub fn softmax_backward(y: &[f64], g: &[f64], gx: &mut [f64], cols: usize) {
    for ((yr, gr), gxr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}

pub fn softmax_fwd(logits: &Tensor) -> Result<Tensor, TensorError> {
    let (_, n) = logits.require_matrix("softmax")?;
    let mut out = Tensor::zeros(logits.shape());
    softmax_into(logits.data(), out.data_mut(), n)?;
    Ok(out)
}

pub fn softmax_bwd(logits: &mut Tensor, out: &Tensor) {
    let n = out.cols();
    softmax_backward(out.data(), out.grad(), logits.grad_mut(), n);
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), TensorError> {
    if labels.len() != rows {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Index {
            op: "cross_entropy",
            label: bad,
            classes,
        });
    }
    Ok(())
}

/// `−ln max(p, ε)` for a single probability.
pub fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Derivative of [`nll`] with respect to `p`.
pub fn nll_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        -1.0 / p
    } else {
        0.0
    }
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, TensorError> {
    let (m, c) = probs.require_matrix("cross_entropy")?;
    check_labels(labels, m, c)?;
    if m == 0 {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| nll(probs.data()[i * c + l]))
        .sum();
    Ok(total / m as f64)
}

/// Accumulates `scale · d(cross_entropy)/d(probs)` into `probs.grad`.
pub fn cross_entropy_bwd(probs: &mut Tensor, labels: &[usize], scale: f64) -> Result<(), TensorError> {
    let (m, c) = probs.require_matrix("cross_entropy_bwd")?;
    check_labels(labels, m, c)?;
    let inv = scale / m.max(1) as f64;
    let (data, grad) = probs.data_and_grad_mut();
    for (i, &l) in labels.iter().enumerate() {
        grad[i * c + l] += inv * nll_grad(data[i * c + l]);
    }
    Ok(())
}

/// `p ← p − lr · ∇p` for every tensor.
pub fn sgd_step(params: &mut [&mut Tensor], learning_rate: f64) {
    for p in params.iter_mut() {
        sgd_update(p, learning_rate);
    }
}

pub fn sgd_update(p: &mut Tensor, learning_rate: f64) {
    let (data, grad) = p.data_and_grad_mut();
    for (d, &g) in data.iter_mut().zip(grad.iter()) {
        *d -= learning_rate * g;
    }
}
