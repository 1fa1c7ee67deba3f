//! Reference implementations and seeded sweeps used by more than one suite.

use std::collections::VecDeque;

use miss::decoder::{logits, DecoderContext};
use miss::graph::Tensor;
use miss::objectives::FeatureQueue;
use miss::tokenization::{encode, mask_tokens, MaskAction, MaskProbs, Mode, TokenSeq, Vocab, DEC, NUM_SPECIAL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// softmax(q·kᵀ/√d + b)·v written out with loops.
pub fn attention_by_hand(q: &Tensor, k: &Tensor, v: &Tensor, b: &Tensor) -> Tensor {
    let d = q.ncols() as f64;
    let mut out = Tensor::zeros((q.nrows(), v.ncols()));
    for i in 0..q.nrows() {
        let mut scores = Vec::new();
        for j in 0..k.nrows() {
            let mut dot = 0.0;
            for c in 0..q.ncols() {
                dot += q[[i, c]] * k[[j, c]];
            }
            scores.push(dot / d.sqrt() + b[[i, j]]);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.nrows() {
            for c in 0..v.ncols() {
                out[[i, c]] += e[j] / z * v[[j, c]];
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MaskCounts {
    pub eligible: usize,
    pub selected: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
    /// Special or padding positions that were selected anyway.
    pub special_hits: usize,
}

impl MaskCounts {
    pub fn selected_fraction(&self) -> f64 {
        self.selected as f64 / self.eligible as f64
    }

    /// Conditional (masked, random, kept) fractions.
    pub fn action_fractions(&self) -> [f64; 3] {
        let s = self.selected as f64;
        [self.masked as f64 / s, self.random as f64 / s, self.kept as f64 / s]
    }
}

/// Masks a padded 30-word caption repeatedly until `min_tokens` eligible
/// tokens have been seen.
pub fn masking_counts(seed: u64, min_tokens: usize) -> MaskCounts {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let v = Vocab::build(words.iter().map(String::as_str), 1).unwrap();
    let text = words[..30].join(" ");
    let s = encode(&text, &v, Mode::TextCls, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = MaskProbs::default();
    let mut c = MaskCounts::default();
    while c.eligible < min_tokens {
        let m = mask_tokens(&s, &v, &mut rng, &probs).unwrap();
        for i in 0..s.len() {
            if Vocab::is_special(s.ids[i]) || s.mask[i] == 0 {
                c.special_hits += usize::from(m.meta[i] != MaskAction::None);
                continue;
            }
            c.eligible += 1;
            match m.meta[i] {
                MaskAction::None => {}
                MaskAction::Masked => c.masked += 1,
                MaskAction::Random => c.random += 1,
                MaskAction::Kept => c.kept += 1,
            }
        }
    }
    c.selected = c.masked + c.random + c.kept;
    c
}

fn random_answer(rng: &mut ChaCha8Rng, vocab_len: usize, len: usize) -> TokenSeq {
    let mut ids = vec![DEC];
    ids.extend((1..len).map(|_| rng.random_range(NUM_SPECIAL..vocab_len) as u32));
    TokenSeq { mask: vec![1; len], ids, mode: Mode::DecodeA }
}

/// Perturbs every position after a random `i` and compares logits at
/// positions `..=i` bit for bit. Returns the first violation.
pub fn causality_sweep(seed: u64, cases: usize) -> Result<(), String> {
    let m = tiny_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = DecoderContext::image(random_tensor(5, 8, 15));
    for case in 0..cases {
        let len = rng.random_range(2..=m.config.max_text_len);
        let seq = random_answer(&mut rng, m.vocab.len(), len);
        let i = rng.random_range(0..len - 1);
        let mut other = seq.clone();
        for j in i + 1..len {
            other.ids[j] = rng.random_range(NUM_SPECIAL..m.vocab.len()) as u32;
        }
        let a = logits(&m.params, &m.config, &seq, &ctx).map_err(|e| e.to_string())?;
        let b = logits(&m.params, &m.config, &other, &ctx).map_err(|e| e.to_string())?;
        for r in 0..=i {
            for c in 0..a.ncols() {
                if a[[r, c]].to_bits() != b[[r, c]].to_bits() {
                    return Err(format!("case {case}: position {r} sees a later token"));
                }
            }
        }
    }
    Ok(())
}

/// Random pushes into a [`FeatureQueue`] mirrored by a plain double-ended
/// queue; contents are compared after every op.
pub fn queue_sweep(seed: u64, ops: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 37;
    let mut q = FeatureQueue::new(cap, 4);
    let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
    for op in 0..ops {
        let k = rng.random_range(1..=cap);
        let rows = unit_rows(&random_tensor(k, 4, op as u64));
        q.push(&rows).map_err(|e| e.to_string())?;
        for r in rows.rows() {
            reference.push_back(r.to_vec());
            if reference.len() > cap {
                reference.pop_front();
            }
        }
        let c = q.contents();
        if c.nrows() != reference.len() {
            return Err(format!("op {op}: {} rows, expected {}", c.nrows(), reference.len()));
        }
        for (i, r) in reference.iter().enumerate() {
            if c.row(i).to_vec() != *r {
                return Err(format!("op {op}: row {i} differs"));
            }
        }
    }
    Ok(())
}
