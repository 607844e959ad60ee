//! Stateless differentiable primitives. Every forward has a matching
//! backward that takes the upstream gradient and returns input/parameter
//! gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// `y = x·W (+ b)`, bias broadcast per row.
pub fn linear(x: &Tensor2D, w: &Tensor2D, b: Option<&[f64]>) -> Result<Tensor2D> {
    if x.cols() != w.rows() {
        return Err(Error::dim(
            "linear",
            format!("x {}", x.shape_str()),
            format!("W {}", w.shape_str()),
        ));
    }
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != w.cols() {
            return Err(Error::dim(
                "linear",
                format!("W {}", w.shape_str()),
                format!("b[{}]", b.len()),
            ));
        }
        y.add_row_broadcast(b)?;
    }
    Ok(y)
}

pub struct LinearGrads {
    pub dx: Tensor2D,
    pub dw: Tensor2D,
    pub db: Vec<f64>,
}

pub fn linear_backward(x: &Tensor2D, w: &Tensor2D, dy: &Tensor2D) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: dy.matmul_t(w)?,
        dw: x.t_matmul(dy)?,
        db: dy.col_sums(),
    })
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit variance, then `gamma·x̂ + beta`.
pub fn layer_norm(
    x: &Tensor2D,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor2D, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("x {}", x.shape_str()),
            format!("gamma[{}]/beta[{}]", gamma.len(), beta.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut y = Tensor2D::zeros(x.rows(), d);
    let mut xhat = Tensor2D::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (c, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gamma[c] * xh[c] + beta[c];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub struct LayerNormGrads {
    pub dx: Tensor2D,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &[f64], dy: &Tensor2D) -> LayerNormGrads {
    let (rows, d) = dy.shape();
    let mut dx = Tensor2D::zeros(rows, d);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let n = d as f64;
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            let dxh = dyr[c] * gamma[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            let dxh = dyr[c] * gamma[c];
            *o = is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

/// Overflow-safe softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {bad}")));
    }
    Ok(softmax_unchecked(x))
}

pub(crate) fn softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// `log Σ exp(x)`
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradient through softmax given its output `p` and upstream `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
