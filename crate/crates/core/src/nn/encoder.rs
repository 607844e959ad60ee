//! Multi-head self-attention and the transformer encoder layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_backward,
    softmax_unchecked, LayerNormCache,
};
use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const LN_EPS: f64 = 1e-5;

/// Where the layer norms sit relative to the residual branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
    #[default]
    Pre,
    /// `LN(x + MHA(x))`, then `LN(· + FFN(·))`.
    Post,
}

/// Parameter handles for one encoder layer. Heads are column blocks of the
/// D×D projections (head `h` owns columns `h·D/H .. (h+1)·D/H`). Keys carry
/// no bias: a key bias shifts every score in a row equally and softmax
/// cancels it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl EncoderLayerParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            d_model,
            heads,
            d_ff,
            wq: ps.add_normal(n("attn.wq"), d_model, d_model, std, rng)?,
            bq: ps.add_zeros(n("attn.bq"), 1, d_model)?,
            wk: ps.add_normal(n("attn.wk"), d_model, d_model, std, rng)?,
            wv: ps.add_normal(n("attn.wv"), d_model, d_model, std, rng)?,
            bv: ps.add_zeros(n("attn.bv"), 1, d_model)?,
            wo: ps.add_normal(n("attn.wo"), d_model, d_model, std, rng)?,
            bo: ps.add_zeros(n("attn.bo"), 1, d_model)?,
            ln1_gamma: ps.add_ones(n("ln1.gamma"), 1, d_model)?,
            ln1_beta: ps.add_zeros(n("ln1.beta"), 1, d_model)?,
            w1: ps.add_normal(n("ffn.w1"), d_model, d_ff, std, rng)?,
            b1: ps.add_zeros(n("ffn.b1"), 1, d_ff)?,
            w2: ps.add_normal(n("ffn.w2"), d_ff, d_model, std, rng)?,
            b2: ps.add_zeros(n("ffn.b2"), 1, d_model)?,
            ln2_gamma: ps.add_ones(n("ln2.gamma"), 1, d_model)?,
            ln2_beta: ps.add_zeros(n("ln2.beta"), 1, d_model)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn check(&self, x: &Tensor2D) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if x.cols() != self.d_model {
            return Err(Error::dim(
                "encoder_layer",
                format!("X {}", x.shape_str()),
                format!("d_model {}", self.d_model),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::Empty("encoder_layer"));
        }
        Ok(())
    }

    /// Every parameter handle of this layer.
    pub fn ids(&self) -> [ParamId; 15] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gamma,
            self.ln1_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    /// One T×T row-stochastic matrix per head.
    weights: Vec<Tensor2D>,
    concat: Tensor2D,
}

impl AttentionCache {
    pub fn attention_weights(&self) -> &[Tensor2D] {
        &self.weights
    }
}

/// Scaled dot-product attention per head, heads concatenated and projected.
pub fn multi_head_attention(
    x: &Tensor2D,
    p: &EncoderLayerParams,
    ps: &ParamSet,
) -> Result<(Tensor2D, AttentionCache)> {
    p.check(x)?;
    let t = x.rows();
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, ps.get(p.wq), Some(ps.get(p.bq).as_slice()))?;
    let k = linear(x, ps.get(p.wk), None)?;
    let v = linear(x, ps.get(p.wv), Some(ps.get(p.bv).as_slice()))?;
    let mut concat = Tensor2D::zeros(t, p.d_model);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let off = h * dh;
        let mut a = Tensor2D::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[off..off + dh];
            let scores: Vec<f64> = (0..t)
                .map(|j| scale * crate::tensor::dot(qi, &k.row(j)[off..off + dh]))
                .collect();
            a.row_mut(i).copy_from_slice(&softmax_unchecked(&scores));
        }
        for i in 0..t {
            let out = &mut concat.row_mut(i)[off..off + dh];
            for j in 0..t {
                let w = a.get(i, j);
                for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *o += w * vv;
                }
            }
        }
        weights.push(a);
    }
    let y = linear(&concat, ps.get(p.wo), Some(ps.get(p.bo).as_slice()))?;
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    dy: &Tensor2D,
    p: &EncoderLayerParams,
    ps: &ParamSet,
    grads: &mut Grads,
) -> Result<Tensor2D> {
    let t = cache.x.rows();
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let out = linear_backward(&cache.concat, ps.get(p.wo), dy)?;
    grads.accumulate(p.wo, &out.dw);
    grads.accumulate_vec(p.bo, &out.db);
    let dconcat = out.dx;

    let mut dq = Tensor2D::zeros(t, p.d_model);
    let mut dk = Tensor2D::zeros(t, p.d_model);
    let mut dv = Tensor2D::zeros(t, p.d_model);
    for h in 0..p.heads {
        let off = h * dh;
        let a = &cache.weights[h];
        for i in 0..t {
            let dout = &dconcat.row(i)[off..off + dh];
            // dA[i, j] = dout_i · v_j
            let da: Vec<f64> = (0..t)
                .map(|j| crate::tensor::dot(dout, &cache.v.row(j)[off..off + dh]))
                .collect();
            for j in 0..t {
                let w = a.get(i, j);
                for (g, d) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dout) {
                    *g += w * d;
                }
            }
            let ds = softmax_backward(a.row(i), &da);
            for (j, &s) in ds.iter().enumerate() {
                let s = s * scale;
                if s == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[off..off + dh];
                for (g, kk) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                    *g += s * kk;
                }
                let qi = &cache.q.row(i)[off..off + dh];
                for (g, qq) in dk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                    *g += s * qq;
                }
            }
        }
    }
    let gq = linear_backward(&cache.x, ps.get(p.wq), &dq)?;
    let gk = linear_backward(&cache.x, ps.get(p.wk), &dk)?;
    let gv = linear_backward(&cache.x, ps.get(p.wv), &dv)?;
    grads.accumulate(p.wq, &gq.dw);
    grads.accumulate_vec(p.bq, &gq.db);
    grads.accumulate(p.wk, &gk.dw);
    grads.accumulate(p.wv, &gv.dw);
    grads.accumulate_vec(p.bv, &gv.db);
    let mut dx = gq.dx;
    dx.add_assign(&gk.dx)?;
    dx.add_assign(&gv.dx)?;
    Ok(dx)
}

#[derive(Debug, Clone)]
struct FfnCache {
    x: Tensor2D,
    pre: Tensor2D,
    act: Tensor2D,
}

fn ffn(x: &Tensor2D, p: &EncoderLayerParams, ps: &ParamSet) -> Result<(Tensor2D, FfnCache)> {
    let pre = linear(x, ps.get(p.w1), Some(ps.get(p.b1).as_slice()))?;
    let act = pre.map(gelu);
    let y = linear(&act, ps.get(p.w2), Some(ps.get(p.b2).as_slice()))?;
    Ok((
        y,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

fn ffn_backward(
    c: &FfnCache,
    dy: &Tensor2D,
    p: &EncoderLayerParams,
    ps: &ParamSet,
    grads: &mut Grads,
) -> Result<Tensor2D> {
    let g2 = linear_backward(&c.act, ps.get(p.w2), dy)?;
    grads.accumulate(p.w2, &g2.dw);
    grads.accumulate_vec(p.b2, &g2.db);
    let mut dpre = g2.dx;
    for (d, x) in dpre.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        *d *= gelu_grad(*x);
    }
    let g1 = linear_backward(&c.x, ps.get(p.w1), &dpre)?;
    grads.accumulate(p.w1, &g1.dw);
    grads.accumulate_vec(p.b1, &g1.db);
    Ok(g1.dx)
}

fn ln(x: &Tensor2D, g: ParamId, b: ParamId, ps: &ParamSet) -> Result<(Tensor2D, LayerNormCache)> {
    layer_norm(x, ps.get(g).as_slice(), ps.get(b).as_slice(), LN_EPS)
}

fn ln_backward(
    c: &LayerNormCache,
    g: ParamId,
    b: ParamId,
    dy: &Tensor2D,
    ps: &ParamSet,
    grads: &mut Grads,
) -> Tensor2D {
    let out = layer_norm_backward(c, ps.get(g).as_slice(), dy);
    grads.accumulate_vec(g, &out.dgamma);
    grads.accumulate_vec(b, &out.dbeta);
    out.dx
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    norm: NormPlacement,
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
}

impl EncoderLayerCache {
    pub fn attention_weights(&self) -> &[Tensor2D] {
        self.attn.attention_weights()
    }
}

pub fn encoder_layer(
    x: &Tensor2D,
    p: &EncoderLayerParams,
    ps: &ParamSet,
    norm: NormPlacement,
) -> Result<(Tensor2D, EncoderLayerCache)> {
    p.check(x)?;
    match norm {
        NormPlacement::Pre => {
            let (a, ln1) = ln(x, p.ln1_gamma, p.ln1_beta, ps)?;
            let (m, attn) = multi_head_attention(&a, p, ps)?;
            let r = x.add(&m)?;
            let (b, ln2) = ln(&r, p.ln2_gamma, p.ln2_beta, ps)?;
            let (f, ffn) = ffn(&b, p, ps)?;
            let y = r.add(&f)?;
            Ok((
                y,
                EncoderLayerCache {
                    norm,
                    ln1,
                    attn,
                    ln2,
                    ffn,
                },
            ))
        }
        NormPlacement::Post => {
            let (m, attn) = multi_head_attention(x, p, ps)?;
            let (r, ln1) = ln(&x.add(&m)?, p.ln1_gamma, p.ln1_beta, ps)?;
            let (f, ffn) = ffn(&r, p, ps)?;
            let (y, ln2) = ln(&r.add(&f)?, p.ln2_gamma, p.ln2_beta, ps)?;
            Ok((
                y,
                EncoderLayerCache {
                    norm,
                    ln1,
                    attn,
                    ln2,
                    ffn,
                },
            ))
        }
    }
}

pub fn encoder_layer_backward(
    c: &EncoderLayerCache,
    dy: &Tensor2D,
    p: &EncoderLayerParams,
    ps: &ParamSet,
    grads: &mut Grads,
) -> Result<Tensor2D> {
    match c.norm {
        NormPlacement::Pre => {
            let db = ffn_backward(&c.ffn, dy, p, ps, grads)?;
            let mut dr = ln_backward(&c.ln2, p.ln2_gamma, p.ln2_beta, &db, ps, grads);
            dr.add_assign(dy)?;
            let da = multi_head_attention_backward(&c.attn, &dr, p, ps, grads)?;
            let mut dx = ln_backward(&c.ln1, p.ln1_gamma, p.ln1_beta, &da, ps, grads);
            dx.add_assign(&dr)?;
            Ok(dx)
        }
        NormPlacement::Post => {
            let ds2 = ln_backward(&c.ln2, p.ln2_gamma, p.ln2_beta, dy, ps, grads);
            let mut dr = ffn_backward(&c.ffn, &ds2, p, ps, grads)?;
            dr.add_assign(&ds2)?;
            let ds1 = ln_backward(&c.ln1, p.ln1_gamma, p.ln1_beta, &dr, ps, grads);
            let mut dx = multi_head_attention_backward(&c.attn, &ds1, p, ps, grads)?;
            dx.add_assign(&ds1)?;
            Ok(dx)
        }
    }
}
