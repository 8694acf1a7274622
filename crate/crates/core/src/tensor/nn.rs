//! Layers composed from tape primitives. Inputs are token sequences laid out
//! as `tokens × features` matrices.

use super::{Tape, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x·W + b`, `W` is `in × out`, `b` is `1 × out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Two-layer perceptron: `fc2(gelu(layer_norm(fc1(x))))`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2Vars {
    pub fc1: LinearVars,
    pub norm: NormVars,
    pub fc2: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

pub fn linear(t: &mut Tape, x: Var, p: &LinearVars) -> Result<Var> {
    let xw = t.matmul(x, p.w)?;
    t.add_row(xw, p.b)
}

pub fn layer_norm(t: &mut Tape, x: Var, p: &NormVars) -> Result<Var> {
    t.layer_norm(x, p.gain, p.bias, LAYER_NORM_EPS)
}

pub fn mlp2(t: &mut Tape, x: Var, p: &Mlp2Vars) -> Result<Var> {
    let h = linear(t, x, &p.fc1)?;
    let h = layer_norm(t, h, &p.norm)?;
    let h = t.gelu(h)?;
    linear(t, h, &p.fc2)
}

/// Scaled dot-product self-attention over the rows of `x`, split into
/// `heads` contiguous column groups.
pub fn multi_head_attention(t: &mut Tape, x: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
    let model_dim = t.value(x).cols();
    if heads == 0 || model_dim % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {model_dim} is not divisible by {heads} heads"
        )));
    }
    let head_dim = model_dim / heads;
    let q = linear(t, x, &p.q)?;
    let k = linear(t, x, &p.k)?;
    let v = linear(t, x, &p.v)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * head_dim, head_dim)?;
        let kh = t.slice_cols(k, h * head_dim, head_dim)?;
        let vh = t.slice_cols(v, h * head_dim, head_dim)?;
        let kt = t.transpose(kh)?;
        let scores = t.matmul(qh, kt)?;
        let scores = t.scale(scores, scale)?;
        let weights = t.softmax_rows(scores)?;
        outs.push(t.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
    linear(t, merged, &p.o)
}
