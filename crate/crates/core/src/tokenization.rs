//! Word-level vocabulary, mode-prefixed encoding and MLM masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const ENC: u32 = 3;
pub const DEC: u32 = 4;
pub const MASK: u32 = 5;
pub const SEP: u32 = 6;
pub const EOS: u32 = 7;
pub const NUM_SPECIAL: usize = 8;

/// Label value for positions that carry no MLM target. Never a valid id.
pub const IGNORE_INDEX: i64 = -100;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[ENC]", "[DEC]", "[MASK]", "[SEP]", "[EOS]"];

/// Which prefix token starts a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// `[CLS]`-prefixed text for the text/fusion encoder.
    TextCls,
    /// `[ENC]`-prefixed question.
    EncodeQ,
    /// `[DEC]`-prefixed answer, terminated by `[EOS]`.
    DecodeA,
}

impl Mode {
    pub fn prefix(self) -> u32 {
        match self {
            Mode::TextCls => CLS,
            Mode::EncodeQ => ENC,
            Mode::DecodeA => DEC,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::TextCls => "TEXT_CLS",
            Mode::EncodeQ => "ENCODE_Q",
            Mode::DecodeA => "DECODE_A",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from `corpus`. Tokens appear in first-occurrence
    /// order after the special tokens.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut order: Vec<String> = Vec::new();
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in corpus {
            seen_any = true;
            for tok in tokenize(text.as_ref()) {
                let count = freq.entry(tok.clone()).or_insert(0);
                if *count == 0 {
                    order.push(tok);
                }
                *count += 1;
            }
        }
        if !seen_any {
            return Err(MissError::EmptyCorpus);
        }
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(order.into_iter().filter(|t| freq[t] >= min_freq))
            .collect();
        Vocab::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its ordered token list (specials first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(MissError::InvalidArgument("vocabulary must start with the special tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(MissError::InvalidArgument(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { token_to_id, id_to_token: tokens })
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| MissError::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.id_to_token.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| MissError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// The text domain on which encode/decode round-trips.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// 1 for real tokens, 0 for padding.
    pub mask: Vec<u8>,
    pub mode: Mode,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }

    /// Same tokens with the prefix swapped for `mode`'s prefix.
    pub fn with_mode(&self, mode: Mode) -> TokenSeq {
        let mut ids = self.ids.clone();
        if let Some(first) = ids.first_mut() {
            *first = mode.prefix();
        }
        TokenSeq { ids, mask: self.mask.clone(), mode }
    }

    /// Drops trailing padding.
    pub fn trimmed(&self) -> TokenSeq {
        let n = self.real_len();
        TokenSeq { ids: self.ids[..n].to_vec(), mask: self.mask[..n].to_vec(), mode: self.mode }
    }

    /// Pads with `[PAD]` up to `len` (no-op if already that long).
    pub fn padded_to(&self, len: usize) -> TokenSeq {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.mask.push(0);
        }
        out
    }

    pub(crate) fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

pub fn encode(text: &str, vocab: &Vocab, mode: Mode, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(MissError::InvalidArgument(format!("max_len must be >= 2, got {max_len}")));
    }
    let mut ids = vec![mode.prefix()];
    let words = tokenize(text);
    let room = if mode == Mode::DecodeA { max_len - 2 } else { max_len - 1 };
    ids.extend(words.iter().take(room).map(|w| vocab.id(w)));
    if mode == Mode::DecodeA {
        ids.push(EOS);
    }
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(TokenSeq { ids, mask, mode })
}

/// Joins non-special tokens with single spaces, stopping at the first `[EOS]`.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(MissError::IdOutOfRange(id as usize))?;
        if id == EOS {
            break;
        }
        if !Vocab::is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProbs {
    /// Probability that a real, non-special token is selected.
    pub select_p: f64,
    /// Fraction of selected tokens replaced with `[MASK]`.
    pub mask_p: f64,
    /// Fraction of selected tokens replaced with a random token.
    pub rand_p: f64,
}

impl Default for MaskProbs {
    fn default() -> Self {
        MaskProbs { select_p: 0.15, mask_p: 0.8, rand_p: 0.1 }
    }
}

impl MaskProbs {
    /// Share of selected tokens left unchanged.
    pub fn keep_p(&self) -> f64 {
        1.0 - self.mask_p - self.rand_p
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("select_p", self.select_p), ("mask_p", self.mask_p), ("rand_p", self.rand_p)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(MissError::InvalidProbability { name, value });
            }
        }
        if self.mask_p + self.rand_p > 1.0 + 1e-12 {
            return Err(MissError::InvalidProbability { name: "mask_p + rand_p", value: self.mask_p + self.rand_p });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskAction {
    None,
    Masked,
    Random,
    Kept,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSeq {
    /// Input with replacements applied; mask and mode as in the source.
    pub input: TokenSeq,
    /// Original ids at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i64>,
    pub meta: Vec<MaskAction>,
}

impl MaskedSeq {
    pub fn selected(&self) -> usize {
        self.meta.iter().filter(|m| **m != MaskAction::None).count()
    }
}

/// A batch of masked sequences; row `b` corresponds to the `b`-th input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedSeq>,
}

impl MaskedBatch {
    pub fn input_ids(&self) -> Vec<Vec<u32>> {
        self.rows.iter().map(|r| r.input.ids.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Vec<i64>> {
        self.rows.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn selected(&self) -> usize {
        self.rows.iter().map(MaskedSeq::selected).sum()
    }
}

/// BERT-style masking of one sequence.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &TokenSeq, vocab: &Vocab, rng: &mut R, probs: &MaskProbs) -> Result<MaskedSeq> {
    probs.validate()?;
    if seq.mode == Mode::DecodeA {
        return Err(MissError::Mode { expected: "TEXT_CLS or ENCODE_Q", got: seq.mode.name() });
    }
    let mut input = seq.clone();
    let mut labels = vec![IGNORE_INDEX; seq.len()];
    let mut meta = vec![MaskAction::None; seq.len()];
    let n_regular = vocab.len().saturating_sub(NUM_SPECIAL);
    for i in 0..seq.len() {
        let id = seq.ids[i];
        if seq.mask[i] == 0 || Vocab::is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= probs.select_p {
            continue;
        }
        labels[i] = id as i64;
        let r: f64 = rng.random();
        if r < probs.mask_p {
            input.ids[i] = MASK;
            meta[i] = MaskAction::Masked;
        } else if r < probs.mask_p + probs.rand_p && n_regular > 0 {
            input.ids[i] = (NUM_SPECIAL + rng.random_range(0..n_regular)) as u32;
            meta[i] = MaskAction::Random;
        } else {
            meta[i] = MaskAction::Kept;
        }
    }
    Ok(MaskedSeq { input, labels, meta })
}

pub fn mask_batch<R: Rng + ?Sized>(seqs: &[TokenSeq], vocab: &Vocab, rng: &mut R, probs: &MaskProbs) -> Result<MaskedBatch> {
    let rows = seqs.iter().map(|s| mask_tokens(s, vocab, rng, probs)).collect::<Result<_>>()?;
    Ok(MaskedBatch { rows })
}
