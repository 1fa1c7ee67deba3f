//! Pre-training and fine-tuning losses plus the momentum/queue machinery.

use ndarray::ArrayView1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::decode_train;
use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::ParamStore;
use crate::tokenization::{MaskedBatch, Mode, TokenSeq, IGNORE_INDEX};

const UNIT_TOL: f64 = 1e-6;

/// Dot product of two unit vectors.
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// Fixed-capacity FIFO of unit-norm feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    buffer: Tensor,
    head: usize,
    fill: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureQueue { buffer: Tensor::zeros((capacity, dim)), head: 0, fill: 0 }
    }

    /// Rebuilds a queue from its raw parts (checkpoint loading).
    pub fn from_parts(buffer: Tensor, head: usize, fill: usize) -> Result<Self> {
        if head >= buffer.nrows().max(1) || fill > buffer.nrows() {
            return Err(MissError::InvalidArgument(format!("queue head {head} / fill {fill} out of range")));
        }
        Ok(FeatureQueue { buffer, head, fill })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn raw_buffer(&self) -> &Tensor {
        &self.buffer
    }

    pub fn push(&mut self, feats: &Tensor) -> Result<()> {
        let k = feats.nrows();
        if k > self.capacity() {
            return Err(MissError::InvalidArgument(format!("cannot push {k} rows into a queue of {}", self.capacity())));
        }
        if feats.ncols() != self.dim() {
            return Err(MissError::shape(format!("queue width {} vs features {}", self.dim(), feats.ncols())));
        }
        for row in feats.rows() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(MissError::InvalidArgument(format!("queued feature has norm {n}")));
            }
        }
        for row in feats.rows() {
            self.buffer.row_mut(self.head).assign(&row);
            self.head = (self.head + 1) % self.capacity();
        }
        self.fill = (self.fill + k).min(self.capacity());
        Ok(())
    }

    /// Stored rows, oldest first.
    pub fn contents(&self) -> Tensor {
        let m = self.capacity();
        let start = if self.fill < m { 0 } else { self.head };
        let mut out = Tensor::zeros((self.fill, self.dim()));
        for i in 0..self.fill {
            out.row_mut(i).assign(&self.buffer.row((start + i) % m));
        }
        out
    }
}

/// Image-feature and text-feature queues.
#[derive(Clone, Debug, PartialEq)]
pub struct ItcQueues {
    pub image: FeatureQueue,
    pub text: FeatureQueue,
}

impl ItcQueues {
    pub fn new(capacity: usize, dim: usize) -> Self {
        ItcQueues { image: FeatureQueue::new(capacity, dim), text: FeatureQueue::new(capacity, dim) }
    }
}

/// Exponential-moving-average copy of a subset of the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub params: ParamStore,
    pub m: f64,
}

impl MomentumPair {
    pub fn new(params: ParamStore, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(MissError::InvalidProbability { name: "momentum", value: m });
        }
        Ok(MomentumPair { params, m })
    }

    /// `θ′ ← m·θ′ + (1−m)·θ` for every momentum parameter.
    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        momentum_update(&mut self.params, online, self.m)
    }
}

pub fn momentum_update(momentum: &mut ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    for (name, t) in momentum.iter() {
        let o = online.expect(name)?;
        if o.dim() != t.dim() {
            return Err(MissError::shape(format!("momentum '{name}' {:?} vs online {:?}", t.dim(), o.dim())));
        }
    }
    for (name, t) in momentum.iter_mut() {
        let o = online.expect(name)?;
        ndarray::Zip::from(t).and(o).for_each(|a, &b| *a = m * *a + (1.0 - m) * b);
    }
    Ok(())
}

pub struct ItcInputs {
    /// Online image projections `[B, d_proj]`.
    pub image: Var,
    /// Online text projections `[B, d_proj]`.
    pub text: Var,
    /// Momentum image projections; gradients never flow into these.
    pub image_m: Var,
    pub text_m: Var,
    /// Temperature as a `[1, 1]` node.
    pub temp: Var,
}

pub struct ItcOutput {
    pub loss: Var,
    /// Image-to-text probabilities over `B + queue` candidates.
    pub p_i2t: Tensor,
    pub p_t2i: Tensor,
    pub candidates: usize,
}

/// Contrastive loss against in-batch momentum features plus queued features,
/// with one-hot targets on the in-batch positive. Pushes the momentum
/// features into the queues afterwards.
pub fn itc_loss(g: &mut Graph, inputs: &ItcInputs, queues: &mut ItcQueues) -> Result<ItcOutput> {
    let temp = g.scalar(inputs.temp);
    if temp <= 0.0 || !temp.is_finite() {
        return Err(MissError::InvalidArgument(format!("temperature must be positive, got {temp}")));
    }
    let b = g.shape(inputs.image).0;
    for v in [inputs.text, inputs.image_m, inputs.text_m] {
        if g.shape(v) != g.shape(inputs.image) {
            return Err(MissError::shape(format!("ITC features {:?} vs {:?}", g.shape(v), g.shape(inputs.image))));
        }
    }
    if b == 0 {
        return Err(MissError::InvalidArgument("empty ITC batch".into()));
    }
    let image_m = g.detach(inputs.image_m);
    let text_m = g.detach(inputs.text_m);
    let text_all = with_queue(g, text_m, &queues.text);
    let image_all = with_queue(g, image_m, &queues.image);

    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    let (l_i2t, p_i2t) = contrast(g, inputs.image, text_all, inputs.temp, &targets);
    let (l_t2i, p_t2i) = contrast(g, inputs.text, image_all, inputs.temp, &targets);
    let sum = g.add(l_i2t, l_t2i);
    let loss = g.scale(sum, 0.5);
    let candidates = p_i2t.ncols();

    let (im, tm) = (g.value(image_m).clone(), g.value(text_m).clone());
    queues.image.push(&im)?;
    queues.text.push(&tm)?;
    Ok(ItcOutput { loss, p_i2t, p_t2i, candidates })
}

fn with_queue(g: &mut Graph, batch: Var, q: &FeatureQueue) -> Var {
    if q.is_empty() {
        batch
    } else {
        let queued = g.constant(q.contents());
        g.concat_rows(&[batch, queued])
    }
}

fn contrast(g: &mut Graph, query: Var, cands: Var, temp: Var, targets: &[Option<usize>]) -> (Var, Tensor) {
    let ct = g.transpose(cands);
    let sim = g.matmul(query, ct);
    let logits = g.div_scalar(sim, temp);
    let logp = g.log_softmax(logits);
    let probs = g.value(logp).mapv(f64::exp);
    (g.nll_mean(logp, targets), probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePolicy {
    /// Sample proportional to the softmax of off-diagonal similarities.
    Hard,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    /// For image `i`, index of its negative text.
    pub text_for_image: Vec<usize>,
    /// For text `j`, index of its negative image.
    pub image_for_text: Vec<usize>,
}

/// One negative per image and per text from a square image-to-text
/// similarity matrix; the diagonal (the positive) is never chosen.
pub fn sample_negatives<R: Rng + ?Sized>(sim: &Tensor, rng: &mut R, policy: NegativePolicy) -> Result<Negatives> {
    let b = sim.nrows();
    if sim.ncols() != b {
        return Err(MissError::shape(format!("similarity matrix must be square, got {:?}", sim.dim())));
    }
    if b < 2 {
        return Err(MissError::CannotSampleNegative(b));
    }
    let mut pick = |row: Vec<f64>, skip: usize| -> Result<usize> {
        let weights: Vec<f64> = match policy {
            NegativePolicy::Uniform => (0..b).map(|j| if j == skip { 0.0 } else { 1.0 }).collect(),
            NegativePolicy::Hard => {
                let m = row.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                row.iter().enumerate().map(|(j, v)| if j == skip { 0.0 } else { (v - m).exp() }).collect()
            }
        };
        let dist = WeightedIndex::new(&weights).map_err(|e| MissError::InvalidArgument(format!("negative weights: {e}")))?;
        Ok(dist.sample(rng))
    };
    let mut text_for_image = Vec::with_capacity(b);
    for i in 0..b {
        text_for_image.push(pick(sim.row(i).to_vec(), i)?);
    }
    let mut image_for_text = Vec::with_capacity(b);
    for j in 0..b {
        image_for_text.push(pick(sim.column(j).to_vec(), j)?);
    }
    Ok(Negatives { text_for_image, image_for_text })
}

/// Mean cross-entropy of `logits` rows against `targets` (skipping `None`).
pub fn token_cross_entropy(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Var {
    let logp = g.log_softmax(logits);
    g.nll_mean(logp, targets)
}

pub struct ItmOutput {
    pub loss: Var,
    /// Probability of "matched" per example.
    pub p_match: Vec<f64>,
}

/// Matched/unmatched classification of joint CLS rows `[N, d]` through the
/// `itm` head. Label 1 means matched.
pub fn itm_loss(g: &mut Graph, ps: &ParamStore, joint_cls: Var, labels: &[usize]) -> Result<ItmOutput> {
    let n = g.shape(joint_cls).0;
    if n == 0 || labels.is_empty() {
        return Err(MissError::InvalidArgument("empty ITM batch".into()));
    }
    let logits = nn::linear(g, ps, "itm", joint_cls)?;
    itm_loss_from_logits(g, logits, labels)
}

pub fn itm_loss_from_logits(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<ItmOutput> {
    let (n, k) = g.shape(logits);
    if n == 0 {
        return Err(MissError::InvalidArgument("empty ITM batch".into()));
    }
    if k != 2 || labels.len() != n || labels.iter().any(|&l| l > 1) {
        return Err(MissError::shape(format!("ITM logits {:?} with {} labels", (n, k), labels.len())));
    }
    let logp = g.log_softmax(logits);
    let p_match = g.value(logp).column(1).mapv(f64::exp).to_vec();
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    Ok(ItmOutput { loss: g.nll_mean(logp, &targets), p_match })
}

/// Decoder context on the tape: rows plus their padding mask.
#[derive(Clone, Debug)]
pub struct CtxVar {
    pub var: Var,
    pub mask: Vec<bool>,
}

impl CtxVar {
    pub fn unmasked(g: &Graph, var: Var) -> Self {
        CtxVar { var, mask: vec![true; g.shape(var).0] }
    }
}

pub struct MlmOutput {
    pub loss: Var,
    /// Number of scored (selected) positions.
    pub count: usize,
}

/// Masked-token loss: the decoder reads each masked caption (with its prefix
/// switched to `[DEC]`) against its image context and is scored at the
/// selected positions only.
pub fn mlm_loss(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, masked: &MaskedBatch, ctx: &[CtxVar]) -> Result<MlmOutput> {
    if masked.rows.len() != ctx.len() {
        return Err(MissError::shape(format!("{} masked rows vs {} contexts", masked.rows.len(), ctx.len())));
    }
    let mut logps = Vec::new();
    let mut targets = Vec::new();
    for (row, c) in masked.rows.iter().zip(ctx) {
        if row.selected() == 0 {
            continue;
        }
        let input = row.input.with_mode(Mode::DecodeA);
        let logits = decode_train(g, ps, cfg, &input, c.var, &c.mask)?;
        logps.push(g.log_softmax(logits));
        targets.extend(row.labels.iter().map(|&l| if l == IGNORE_INDEX { None } else { Some(l as usize) }));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        let zero = g.constant(Tensor::zeros((1, 1)));
        return Ok(MlmOutput { loss: zero, count: 0 });
    }
    let all = if logps.len() == 1 { logps[0] } else { g.concat_rows(&logps) };
    Ok(MlmOutput { loss: g.nll_mean(all, &targets), count })
}

/// Next-token targets for a `DECODE_A` sequence: position `i` predicts the
/// token at `i + 1` while that token is real.
pub fn shifted_targets(answer: &TokenSeq) -> Vec<Option<usize>> {
    (0..answer.len())
        .map(|i| if i + 1 < answer.len() && answer.mask[i + 1] == 1 { Some(answer.ids[i + 1] as usize) } else { None })
        .collect()
}

/// Answer-generation loss averaged over every predicted token in the batch.
pub fn lm_loss(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, answers: &[TokenSeq], ctx: &[CtxVar]) -> Result<Var> {
    if answers.len() != ctx.len() || answers.is_empty() {
        return Err(MissError::shape(format!("{} answers vs {} contexts", answers.len(), ctx.len())));
    }
    let mut logps = Vec::with_capacity(answers.len());
    let mut targets = Vec::new();
    for (a, c) in answers.iter().zip(ctx) {
        if a.mode != Mode::DecodeA {
            return Err(MissError::Mode { expected: "DECODE_A", got: a.mode.name() });
        }
        if a.real_len() < 2 {
            return Err(MissError::InvalidArgument("answer has no tokens to predict".into()));
        }
        let logits = decode_train(g, ps, cfg, a, c.var, &c.mask)?;
        logps.push(g.log_softmax(logits));
        targets.extend(shifted_targets(a));
    }
    let all = if logps.len() == 1 { logps[0] } else { g.concat_rows(&logps) };
    Ok(g.nll_mean(all, &targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::from_shape_fn((rows, dim), |_| rng.random::<f64>() - 0.5);
        for mut r in t.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        t
    }

    #[test]
    fn similarity_identities() {
        let a = array![0.6, 0.8];
        let b = array![-0.8, 0.6];
        assert!((similarity(a.view(), a.view()) - 1.0).abs() < 1e-6);
        assert!(similarity(a.view(), b.view()).abs() < 1e-6);
    }

    #[test]
    fn queue_fifo_basics() {
        let f = unit_rows(5, 3, 0);
        let mut q = FeatureQueue::new(4, 3);
        q.push(&f.slice(ndarray::s![0..2, ..]).to_owned()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.contents(), f.slice(ndarray::s![0..2, ..]));
        q.push(&f.slice(ndarray::s![2..4, ..]).to_owned()).unwrap();
        q.push(&f.slice(ndarray::s![4..5, ..]).to_owned()).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.contents(), f.slice(ndarray::s![1..5, ..]));
        assert!(q.push(&unit_rows(5, 3, 1)).is_err());
        assert!(q.push(&(unit_rows(1, 3, 1) * 2.0)).is_err());
    }

    #[test]
    fn momentum_examples() {
        let mut online = ParamStore::new();
        online.insert("w", Tensor::zeros((2, 2)));
        let mut mom = ParamStore::new();
        mom.insert("w", Tensor::ones((2, 2)));
        let mut pair = MomentumPair::new(mom.clone(), 0.995).unwrap();
        pair.update(&online).unwrap();
        assert!(pair.params.get("w").unwrap().iter().all(|&v| v == 0.995));

        let mut bad = ParamStore::new();
        bad.insert("w", Tensor::zeros((3, 2)));
        assert!(matches!(momentum_update(&mut mom, &bad, 0.5), Err(MissError::Shape(_))));
    }

    #[test]
    fn negatives_forced_for_pairs() {
        let sim = array![[1.0, 0.2], [0.3, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for policy in [NegativePolicy::Hard, NegativePolicy::Uniform] {
            for _ in 0..20 {
                let n = sample_negatives(&sim, &mut rng, policy).unwrap();
                assert_eq!(n.text_for_image, vec![1, 0]);
                assert_eq!(n.image_for_text, vec![1, 0]);
            }
        }
        assert!(matches!(sample_negatives(&array![[1.0]], &mut rng, NegativePolicy::Hard), Err(MissError::CannotSampleNegative(1))));
    }

    #[test]
    fn hard_negatives_follow_dominant_similarity() {
        let mut sim = Tensor::zeros((4, 4));
        sim[[0, 2]] = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hits = (0..2000).filter(|_| sample_negatives(&sim, &mut rng, NegativePolicy::Hard).unwrap().text_for_image[0] == 2).count();
        assert!(hits as f64 / 2000.0 > 0.99);
    }

    #[test]
    fn itc_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let f = g.constant(unit_rows(2, 3, 0));
        let t = g.constant(array![[0.0]]);
        let mut q = ItcQueues::new(4, 3);
        let inputs = ItcInputs { image: f, text: f, image_m: f, text_m: f, temp: t };
        assert!(itc_loss(&mut g, &inputs, &mut q).is_err());
    }

    #[test]
    fn itm_uniform_probability_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_elem((5, 2), 0.3));
        let out = itm_loss_from_logits(&mut g, logits, &[1, 0, 0, 1, 0]).unwrap();
        assert!((g.scalar(out.loss) - 2f64.ln()).abs() < 1e-9);
        assert!(out.p_match.iter().all(|p| (p - 0.5).abs() < 1e-12));
        let empty = g.constant(Tensor::zeros((0, 2)));
        assert!(itm_loss_from_logits(&mut g, empty, &[]).is_err());
    }

    #[test]
    fn itm_perfect_classifier_limit() {
        let mut g = Graph::new();
        let logits = g.constant(array![[-50.0, 50.0], [50.0, -50.0]]);
        let out = itm_loss_from_logits(&mut g, logits, &[1, 0]).unwrap();
        assert!(g.scalar(out.loss) < 1e-30);
    }

    #[test]
    fn token_cross_entropy_identities() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::from_elem((3, 17), 1.25));
        let l = token_cross_entropy(&mut g, uniform, &[Some(0), None, Some(16)]);
        assert!((g.scalar(l) - 17f64.ln()).abs() < 1e-9);
        let mut peaked = Tensor::zeros((2, 5));
        peaked[[0, 3]] = 100.0;
        peaked[[1, 1]] = 100.0;
        let p = g.constant(peaked);
        let l = token_cross_entropy(&mut g, p, &[Some(3), Some(1)]);
        assert!(g.scalar(l) < 1e-40);
    }
}
