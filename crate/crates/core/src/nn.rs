//! Transformer building blocks on top of the [`Graph`] tape.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Tensor, Var};
use crate::params::{Init, ParamStore};

pub fn linear(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    let h = g.matmul(x, w);
    Ok(g.add_row(h, b))
}

pub fn layer_norm(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{prefix}.g"))?;
    let beta = g.param(ps, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

pub fn ffn(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, ps, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, ps, &format!("{prefix}.fc2"), h)
}

/// `SoftMax(QKᵀ/√d + B)V` for a single head. `bias` is a constant additive
/// term (masking); `learned_bias` is an optional `[1, Lk]` parameter row
/// broadcast over queries.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<&Tensor>, learned_bias: Option<Var>) -> Var {
    let d = g.shape(q).1 as f64;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let mut scores = g.scale(scores, 1.0 / d.sqrt());
    if let Some(b) = bias {
        scores = g.add_const(scores, b);
    }
    if let Some(lb) = learned_bias {
        scores = g.add_row(scores, lb);
    }
    let weights = g.softmax(scores);
    g.matmul(weights, v)
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    heads: usize,
    xq: Var,
    xkv: Var,
    bias: Option<&Tensor>,
    learned_bias: Option<Var>,
) -> Result<Var> {
    let q = linear(g, ps, &format!("{prefix}.q"), xq)?;
    let k = linear(g, ps, &format!("{prefix}.k"), xkv)?;
    let v = linear(g, ps, &format!("{prefix}.v"), xkv)?;
    let d = g.shape(q).1;
    let dh = d / heads;
    let out = if heads == 1 {
        attention(g, q, k, v, bias, learned_bias)
    } else {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            per_head.push(attention(g, qh, kh, vh, bias, learned_bias));
        }
        g.concat_cols(&per_head)
    };
    linear(g, ps, &format!("{prefix}.o"), out)
}

/// `[lq, lk]` additive mask: `-inf` on keys whose mask entry is false.
pub fn key_padding_bias(lq: usize, key_mask: &[bool]) -> Tensor {
    Tensor::from_shape_fn((lq, key_mask.len()), |(_, j)| if key_mask[j] { 0.0 } else { f64::NEG_INFINITY })
}

/// Causal mask combined with key padding: query `i` sees keys `j <= i`.
pub fn causal_bias(key_mask: &[bool]) -> Tensor {
    let l = key_mask.len();
    Tensor::from_shape_fn((l, l), |(i, j)| if j <= i && key_mask[j] { 0.0 } else { f64::NEG_INFINITY })
}

pub fn init_attention<R: Rng>(init: &mut Init<'_, R>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{p}"), d, d);
    }
}

pub fn init_ffn<R: Rng>(init: &mut Init<'_, R>, prefix: &str, d: usize, hidden: usize) {
    init.linear(&format!("{prefix}.fc1"), d, hidden);
    init.linear(&format!("{prefix}.fc2"), hidden, d);
}
