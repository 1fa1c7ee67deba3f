//! Joint text-multimodal encoder.
//!
//! One stack of layers, each holding bidirectional self-attention,
//! cross-attention and a feed-forward block. In text mode the cross-attention
//! sublayer is skipped (identity residual) and the output feeds the
//! contrastive objective; in fusion mode the text queries attend to image
//! keys/values and the output is the joint feature `f`.

use ndarray::Array1;
use rand::Rng;

use crate::error::{MissError, Result};
use crate::graph::{softmax_rows, Graph, Tensor, Var};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tokenization::{Mode, TokenSeq};

/// Guard used when normalizing projected features.
pub const NORM_EPS: f64 = 1e-12;

/// `SoftMax(QKᵀ/√d + B)V` on plain matrices.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = q.ncols();
    if d == 0 {
        return Err(MissError::InvalidArgument("attention width d must be positive".into()));
    }
    if k.ncols() != d || k.nrows() != v.nrows() || k.nrows() == 0 {
        return Err(MissError::shape(format!("Q {:?}, K {:?}, V {:?}", q.dim(), k.dim(), v.dim())));
    }
    if b.dim() != (q.nrows(), k.nrows()) {
        return Err(MissError::shape(format!("bias {:?} vs scores {:?}", b.dim(), (q.nrows(), k.nrows()))));
    }
    let scores = q.dot(&k.t()) / (d as f64).sqrt() + b;
    Ok(softmax_rows(&scores).dot(v))
}

/// Linear map followed by L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ProjectionHead {
    pub fn from_params(ps: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(ProjectionHead { w: ps.expect(&format!("{prefix}.w"))?.clone(), b: ps.expect(&format!("{prefix}.b"))?.clone() })
    }
}

/// Projects one embedding row to a unit vector. A zero projection is divided
/// by [`NORM_EPS`] instead of its norm, so it stays zero rather than NaN.
pub fn project_cls(row: &Array1<f64>, head: &ProjectionHead) -> Result<Array1<f64>> {
    if row.len() != head.w.nrows() || head.b.dim() != (1, head.w.ncols()) {
        return Err(MissError::shape(format!("row {} vs head {:?}", row.len(), head.w.dim())));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(MissError::InvalidArgument("non-finite embedding".into()));
    }
    let y = row.dot(&head.w) + head.b.row(0);
    let n = y.dot(&y).sqrt().max(NORM_EPS);
    Ok(y / n)
}

/// Graph version of [`project_cls`] applied to every row of `x`.
pub fn project(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, ps, prefix, x)?;
    Ok(g.l2_normalize(h, NORM_EPS))
}

/// Layers that run in text mode. In the dual-tower ablation only the lower
/// half does; the upper half is the fusion-only tower.
pub fn text_layers(cfg: &ModelConfig) -> std::ops::Range<usize> {
    if cfg.dual_tower {
        0..cfg.jtm.depth / 2
    } else {
        0..cfg.jtm.depth
    }
}

pub fn has_cross(cfg: &ModelConfig, layer: usize) -> bool {
    !cfg.dual_tower || layer >= cfg.jtm.depth / 2
}

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, vocab_size: usize) {
    let d = cfg.d();
    init.normal("text.tok".into(), vocab_size, d);
    init.normal("text.pos".into(), cfg.max_text_len, d);
    for i in 0..cfg.jtm.depth {
        let p = format!("jtm.layers.{i}");
        init.layer_norm(&format!("{p}.ln_self"), d);
        nn::init_attention(init, &format!("{p}.self_attn"), d);
        if has_cross(cfg, i) {
            init.layer_norm(&format!("{p}.ln_cross"), d);
            nn::init_attention(init, &format!("{p}.cross_attn"), d);
            if cfg.learned_cross_bias {
                init.zeros(format!("{p}.cross_attn.bias"), 1, cfg.vision.num_patches() + 1);
            }
        }
        init.layer_norm(&format!("{p}.ln_ffn"), d);
        nn::init_ffn(init, &format!("{p}.ffn"), d, cfg.jtm.ffn_dim);
    }
    init.layer_norm("jtm.ln_f", d);
}

/// Token plus positional embeddings, `[L, d]`.
pub fn embed_tokens(g: &mut Graph, ps: &ParamStore, prefix: &str, tokens: &TokenSeq) -> Result<Var> {
    let tok = g.param(ps, &format!("{prefix}.tok"))?;
    let pos = g.param(ps, &format!("{prefix}.pos"))?;
    let (vocab, max_len) = (g.shape(tok).0, g.shape(pos).0);
    if tokens.len() > max_len || tokens.is_empty() {
        return Err(MissError::shape(format!("sequence length {} (max {max_len})", tokens.len())));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(MissError::IdOutOfRange(bad as usize));
    }
    let e = g.gather(tok, &tokens.ids_usize());
    let p = g.slice_rows(pos, 0, tokens.len());
    Ok(g.add(e, p))
}

fn check_image(g: &Graph, img: Var, d: usize) -> Result<()> {
    let (rows, cols) = g.shape(img);
    if rows < 2 {
        return Err(MissError::InvalidArgument("image embeddings must contain at least one patch".into()));
    }
    if cols != d {
        return Err(MissError::shape(format!("image width {cols} vs model width {d}")));
    }
    Ok(())
}

fn run(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, tokens: &TokenSeq, image: Option<Var>) -> Result<Var> {
    let heads = cfg.jtm.heads;
    let mut x = embed_tokens(g, ps, "text", tokens)?;
    let self_bias = nn::key_padding_bias(tokens.len(), &tokens.key_mask());
    let layers = if image.is_some() { 0..cfg.jtm.depth } else { text_layers(cfg) };
    for i in layers {
        let p = format!("jtm.layers.{i}");
        let h = nn::layer_norm(g, ps, &format!("{p}.ln_self"), x)?;
        let h = nn::multi_head_attention(g, ps, &format!("{p}.self_attn"), heads, h, h, Some(&self_bias), None)?;
        x = g.add(x, h);
        if let (Some(img), true) = (image, has_cross(cfg, i)) {
            let learned = if cfg.learned_cross_bias {
                let b = g.param(ps, &format!("{p}.cross_attn.bias"))?;
                if g.shape(b).1 != g.shape(img).0 {
                    return Err(MissError::shape(format!(
                        "learned cross bias covers {} keys, image has {}",
                        g.shape(b).1,
                        g.shape(img).0
                    )));
                }
                Some(b)
            } else {
                None
            };
            let h = nn::layer_norm(g, ps, &format!("{p}.ln_cross"), x)?;
            let h = nn::multi_head_attention(g, ps, &format!("{p}.cross_attn"), heads, h, img, None, learned)?;
            x = g.add(x, h);
        }
        let h = nn::layer_norm(g, ps, &format!("{p}.ln_ffn"), x)?;
        let h = nn::ffn(g, ps, &format!("{p}.ffn"), h)?;
        x = g.add(x, h);
    }
    nn::layer_norm(g, ps, "jtm.ln_f", x)
}

/// Text mode: cross-attention is bypassed. Output `[L, d]`, row 0 is `t_cls`.
pub fn encode_text(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, tokens: &TokenSeq) -> Result<Var> {
    if tokens.mode != Mode::TextCls {
        return Err(MissError::Mode { expected: "TEXT_CLS", got: tokens.mode.name() });
    }
    run(g, ps, cfg, tokens, None)
}

/// Fusion mode: text queries attend to `image` (`[n+1, d]`) in every layer
/// that carries cross-attention. Output is the joint feature `[L, d]`.
pub fn encode_fusion(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, tokens: &TokenSeq, image: Var) -> Result<Var> {
    if tokens.mode == Mode::DecodeA {
        return Err(MissError::Mode { expected: "TEXT_CLS or ENCODE_Q", got: tokens.mode.name() });
    }
    check_image(g, image, cfg.d())?;
    run(g, ps, cfg, tokens, Some(image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_key_returns_value_row() {
        let q = array![[0.3, -1.2], [2.0, 0.5]];
        let k = array![[1.0, 1.0]];
        let v = array![[4.0, -7.5]];
        let out = cross_attention(&q, &k, &v, &Tensor::zeros((2, 1))).unwrap();
        assert_eq!(out, array![[4.0, -7.5], [4.0, -7.5]]);
    }

    #[test]
    fn large_negative_bias_masks_a_key() {
        let q = array![[0.1, 0.2, 0.3]];
        let k = array![[1.0, 0.0, 0.5], [0.2, 0.1, -0.4], [3.0, 3.0, 3.0]];
        let v = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [100.0, 100.0, 100.0]];
        let b = array![[0.0, 0.0, -1e9]];
        let masked = cross_attention(&q, &k, &v, &b).unwrap();
        let scores = q.dot(&k.t()) / 3f64.sqrt();
        let w = softmax_rows(&(&scores + &b));
        assert!(w[[0, 2]] < 1e-300);
        let reduced = cross_attention(&q, &k.slice(ndarray::s![0..2, ..]).to_owned(), &v.slice(ndarray::s![0..2, ..]).to_owned(), &Tensor::zeros((1, 2))).unwrap();
        for j in 0..3 {
            assert!((masked[[0, j]] - reduced[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let q = Tensor::zeros((2, 3));
        assert!(matches!(cross_attention(&q, &Tensor::zeros((2, 2)), &Tensor::zeros((2, 3)), &Tensor::zeros((2, 2))), Err(MissError::Shape(_))));
        assert!(matches!(cross_attention(&q, &Tensor::zeros((2, 3)), &Tensor::zeros((1, 3)), &Tensor::zeros((2, 2))), Err(MissError::Shape(_))));
        assert!(matches!(cross_attention(&q, &Tensor::zeros((2, 3)), &Tensor::zeros((2, 3)), &Tensor::zeros((1, 2))), Err(MissError::Shape(_))));
        let empty = Tensor::zeros((1, 0));
        assert!(matches!(cross_attention(&empty, &Tensor::zeros((1, 0)), &Tensor::zeros((1, 0)), &Tensor::zeros((1, 1))), Err(MissError::InvalidArgument(_))));
    }

    #[test]
    fn projection_identity_and_norm() {
        let head = ProjectionHead { w: Tensor::eye(3), b: Tensor::zeros((1, 3)) };
        let unit = array![0.6, 0.0, 0.8];
        let out = project_cls(&unit, &head).unwrap();
        for j in 0..3 {
            assert!((out[j] - unit[j]).abs() < 1e-15);
        }
        let out = project_cls(&array![3.0, -4.0, 12.0], &head).unwrap();
        assert!((out.dot(&out).sqrt() - 1.0).abs() < 1e-6);
        let zero = project_cls(&array![0.0, 0.0, 0.0], &head).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }
}
