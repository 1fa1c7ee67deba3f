//! Causal text decoder with cross-attention to image or joint context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::jtm::embed_tokens;
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{Init, ParamStore};
use crate::tokenization::{decode, Mode, TokenSeq, Vocab, DEC, EOS, NUM_SPECIAL};

/// Which encoder output the decoder cross-attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    /// Image embeddings `{v_cls, v_1, .., v_n}`.
    Image,
    /// Joint feature `f` from the fusion encoder.
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderContext {
    pub vectors: Tensor,
    pub kind: ContextKind,
    /// Real (true) vs padded (false) context rows.
    pub key_mask: Vec<bool>,
}

impl DecoderContext {
    pub fn image(vectors: Tensor) -> Self {
        let key_mask = vec![true; vectors.nrows()];
        DecoderContext { vectors, kind: ContextKind::Image, key_mask }
    }

    pub fn joint(vectors: Tensor, tokens: &TokenSeq) -> Self {
        DecoderContext { vectors, kind: ContextKind::Joint, key_mask: tokens.key_mask() }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.vectors.nrows() == 0 || self.vectors.ncols() != d || self.key_mask.len() != self.vectors.nrows() {
            return Err(MissError::shape(format!("decoder context {:?} (model width {d})", self.vectors.dim())));
        }
        if !self.key_mask.iter().any(|&m| m) {
            return Err(MissError::InvalidArgument("decoder context has no unmasked rows".into()));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(MissError::InvalidArgument("decoder context is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub strategy: Strategy,
    /// Maximum number of generated tokens, excluding `[DEC]` and `[EOS]`.
    pub max_len: usize,
    /// Candidate tokens besides `[EOS]`; `None` means every regular token.
    pub allowed: Option<Vec<u32>>,
    /// `[EOS]` is not a candidate before this many tokens exist.
    pub min_len: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { strategy: Strategy::Greedy, max_len: 16, allowed: None, min_len: 0 }
    }
}

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, vocab_size: usize) {
    let d = cfg.d();
    init.normal("dec.tok".into(), vocab_size, d);
    init.normal("dec.pos".into(), cfg.max_text_len, d);
    for i in 0..cfg.decoder.depth {
        let p = format!("dec.layers.{i}");
        init.layer_norm(&format!("{p}.ln_self"), d);
        nn::init_attention(init, &format!("{p}.self_attn"), d);
        init.layer_norm(&format!("{p}.ln_cross"), d);
        nn::init_attention(init, &format!("{p}.cross_attn"), d);
        init.layer_norm(&format!("{p}.ln_ffn"), d);
        nn::init_ffn(init, &format!("{p}.ffn"), d, cfg.decoder.ffn_dim);
    }
    init.layer_norm("dec.ln_f", d);
    init.zeros("dec.head.b".into(), 1, vocab_size);
}

/// Teacher-forced pass. Returns logits `[L, |V|]`; the output head reuses
/// the token embedding matrix.
pub fn decode_train(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, tokens: &TokenSeq, ctx: Var, ctx_mask: &[bool]) -> Result<Var> {
    if tokens.mode != Mode::DecodeA || tokens.ids.first() != Some(&DEC) {
        return Err(MissError::Mode { expected: "DECODE_A", got: tokens.mode.name() });
    }
    if g.shape(ctx).0 != ctx_mask.len() || g.shape(ctx).1 != cfg.d() {
        return Err(MissError::shape(format!("context {:?} with mask of {}", g.shape(ctx), ctx_mask.len())));
    }
    let heads = cfg.decoder.heads;
    let mut x = embed_tokens(g, ps, "dec", tokens)?;
    let self_bias = nn::causal_bias(&tokens.key_mask());
    let cross_bias = if ctx_mask.iter().all(|&m| m) { None } else { Some(nn::key_padding_bias(tokens.len(), ctx_mask)) };
    for i in 0..cfg.decoder.depth {
        let p = format!("dec.layers.{i}");
        let h = nn::layer_norm(g, ps, &format!("{p}.ln_self"), x)?;
        let h = nn::multi_head_attention(g, ps, &format!("{p}.self_attn"), heads, h, h, Some(&self_bias), None)?;
        x = g.add(x, h);
        let h = nn::layer_norm(g, ps, &format!("{p}.ln_cross"), x)?;
        let h = nn::multi_head_attention(g, ps, &format!("{p}.cross_attn"), heads, h, ctx, cross_bias.as_ref(), None)?;
        x = g.add(x, h);
        let h = nn::layer_norm(g, ps, &format!("{p}.ln_ffn"), x)?;
        let h = nn::ffn(g, ps, &format!("{p}.ffn"), h)?;
        x = g.add(x, h);
    }
    let x = nn::layer_norm(g, ps, "dec.ln_f", x)?;
    let emb = g.param(ps, "dec.tok")?;
    let emb_t = g.transpose(emb);
    let logits = g.matmul(x, emb_t);
    let bias = g.param(ps, "dec.head.b")?;
    Ok(g.add_row(logits, bias))
}

/// Forward-only logits for plain inputs.
pub fn logits(ps: &ParamStore, cfg: &ModelConfig, tokens: &TokenSeq, ctx: &DecoderContext) -> Result<Tensor> {
    ctx.validate(cfg.d())?;
    let mut g = Graph::inference();
    let c = g.constant(ctx.vectors.clone());
    let out = decode_train(&mut g, ps, cfg, tokens, c, &ctx.key_mask)?;
    Ok(g.value(out).clone())
}

fn next_log_probs(ps: &ParamStore, cfg: &ModelConfig, prefix: &[u32], ctx: &DecoderContext) -> Result<Vec<f64>> {
    let seq = TokenSeq { ids: prefix.to_vec(), mask: vec![1; prefix.len()], mode: Mode::DecodeA };
    let l = logits(ps, cfg, &seq, ctx)?;
    let last = l.row(l.nrows() - 1);
    let lse = crate::graph::log_sum_exp(last.iter().copied());
    Ok(last.iter().map(|v| v - lse).collect())
}

fn candidates(vocab_size: usize, opts: &GenerateOptions) -> Vec<u32> {
    let mut c = vec![EOS];
    match &opts.allowed {
        Some(list) => c.extend(list.iter().copied().filter(|&t| t != EOS && (t as usize) < vocab_size)),
        None => c.extend((NUM_SPECIAL as u32)..vocab_size as u32),
    }
    c.sort_unstable();
    c.dedup();
    c
}

/// Ids produced after `[DEC]` (without `[EOS]`).
pub fn generate_ids(ps: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, ctx: &DecoderContext, opts: &GenerateOptions) -> Result<Vec<u32>> {
    if opts.max_len < 1 {
        return Err(MissError::InvalidArgument("max_len must be >= 1".into()));
    }
    ctx.validate(cfg.d())?;
    let steps = opts.max_len.min(cfg.max_text_len.saturating_sub(1));
    let cands = candidates(vocab.len(), opts);
    match opts.strategy {
        Strategy::Greedy => {
            let mut prefix = vec![DEC];
            for step in 0..steps {
                let lp = next_log_probs(ps, cfg, &prefix, ctx)?;
                let mut best: Option<u32> = None;
                for &c in &cands {
                    if c == EOS && step < opts.min_len {
                        continue;
                    }
                    if best.is_none_or(|b| lp[c as usize] > lp[b as usize]) {
                        best = Some(c);
                    }
                }
                let Some(best) = best else { break };
                if best == EOS {
                    break;
                }
                prefix.push(best);
            }
            Ok(prefix[1..].to_vec())
        }
        Strategy::Beam(k) => {
            if k == 0 {
                return Err(MissError::InvalidArgument("beam width must be >= 1".into()));
            }
            // (tokens after [DEC], summed log-probability, finished)
            let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(vec![], 0.0, false)];
            for step in 0..steps {
                if beams.iter().all(|b| b.2) {
                    break;
                }
                let mut next = Vec::new();
                for (toks, score, done) in &beams {
                    if *done {
                        next.push((toks.clone(), *score, true));
                        continue;
                    }
                    let mut prefix = vec![DEC];
                    prefix.extend_from_slice(toks);
                    let lp = next_log_probs(ps, cfg, &prefix, ctx)?;
                    for &c in &cands {
                        if c == EOS && step < opts.min_len {
                            continue;
                        }
                        let s = score + lp[c as usize];
                        if c == EOS {
                            next.push((toks.clone(), s, true));
                        } else {
                            let mut t = toks.clone();
                            t.push(c);
                            next.push((t, s, false));
                        }
                    }
                }
                // stable: ties keep expansion order
                next.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
                next.truncate(k);
                beams = next;
            }
            Ok(beams.into_iter().next().map(|b| b.0).unwrap_or_default())
        }
    }
}

pub fn generate(ps: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, ctx: &DecoderContext, opts: &GenerateOptions) -> Result<String> {
    let ids = generate_ids(ps, cfg, vocab, ctx, opts)?;
    decode(&ids, vocab)
}
