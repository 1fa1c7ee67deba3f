//! Pre-training and fine-tuning loops, configuration presets and evaluation.
//!
//! All randomness is drawn from ChaCha streams derived from the configured
//! seed and the global step (or epoch), so a run resumed from a checkpoint
//! replays exactly the batches and masks of an uninterrupted run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::datasets::{self, AnswerType, VqaRecord};
use crate::decoder::{ContextKind, GenerateOptions, Strategy};
use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::jtm;
use crate::model::{MissModel, ModelConfig};
use crate::objectives::{self, CtxVar, ItcInputs, ItcQueues, NegativePolicy};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tokenization::{encode, mask_batch, MaskProbs, Mode, TokenSeq, Vocab};
use crate::vision::{self, ImageTensor, Normalization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { itc: 1.0, itm: 1.0, mlm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Momentum-encoder coefficient `m`.
    pub momentum: f64,
    /// Feature-queue capacity `M`.
    pub queue_size: usize,
    pub temp_init: f64,
    /// Clamp applied to the learnable temperature after each update.
    pub temp_range: [f64; 2],
    pub mask: MaskProbs,
    pub negatives: NegativePolicy,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub vocab_min_freq: usize,
    /// Image-text pair manifest (pre-training).
    pub pairs: Option<PathBuf>,
    /// VQA manifest (fine-tuning; also feeds the vocabulary when building one).
    pub vqa: Option<PathBuf>,
    /// Train/val/test ratios; fine-tuning then uses the train split only.
    pub split: Option<[f64; 3]>,
    /// Checkpoint whose parameters and vocabulary initialize the model.
    pub init_ckpt: Option<PathBuf>,
    /// Checkpoint of this same run to continue from.
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub decoder_context: ContextKind,
    /// Keeps every parameter fixed (losses are still computed).
    pub freeze: bool,
    /// Save every this many epochs, plus after the last step.
    pub checkpoint_every: usize,
    /// Stops after this many global steps (the schedule still spans all epochs).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full(Stage::Pretrain)
    }
}

impl TrainConfig {
    /// Published settings: AdamW at 2e-5 with weight decay 0.05 and cosine
    /// decay to zero; 100 pre-training epochs at 224 px, 200 fine-tuning
    /// epochs at 480 px.
    pub fn full(stage: Stage) -> Self {
        let (epochs, image_size, out) = match stage {
            Stage::Pretrain => (100, 224, "ckpt/pretrain"),
            Stage::Finetune => (200, 480, "ckpt/finetune"),
        };
        let mut model = ModelConfig::base();
        model.vision.image_size = image_size;
        TrainConfig {
            stage,
            lr: 2e-5,
            weight_decay: 0.05,
            epochs,
            batch_size: 8,
            image_size,
            seed: 0,
            loss_weights: LossWeights::default(),
            momentum: 0.995,
            queue_size: 65_536,
            temp_init: 0.07,
            temp_range: [0.001, 0.5],
            mask: MaskProbs::default(),
            negatives: NegativePolicy::Hard,
            model,
            normalization: Normalization::default(),
            vocab_min_freq: 1,
            pairs: None,
            vqa: None,
            split: None,
            init_ckpt: None,
            resume: None,
            out: PathBuf::from(out),
            decoder_context: ContextKind::Joint,
            freeze: false,
            checkpoint_every: 1,
            max_steps: None,
        }
    }

    /// One-core settings for the synthetic corpus: a small model, 200/300
    /// epochs (one step each with 8 examples) at 32/48 px.
    pub fn desk(stage: Stage) -> Self {
        let image_size = match stage {
            Stage::Pretrain => 32,
            Stage::Finetune => 48,
        };
        let mut model = ModelConfig::desk();
        model.vision.image_size = image_size;
        TrainConfig {
            lr: 5e-4,
            momentum: 0.9,
            epochs: match stage {
                Stage::Pretrain => 200,
                Stage::Finetune => 300,
            },
            image_size,
            queue_size: 1024,
            model,
            checkpoint_every: 50,
            ..Self::full(stage)
        }
    }

    pub fn preset(name: &str, stage: Stage) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(stage)),
            "desk" => Ok(Self::desk(stage)),
            other => Err(MissError::Config(format!("unknown preset '{other}' (expected full or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MissError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("epochs, batch_size and checkpoint_every must be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1]");
        }
        if self.queue_size == 0 || !(self.temp_range[0] > 0.0 && self.temp_range[0] <= self.temp_range[1]) {
            return bad("queue_size must be positive and temp_range a positive interval");
        }
        if !(self.temp_range[0]..=self.temp_range[1]).contains(&self.temp_init) {
            return bad("temp_init must lie in temp_range");
        }
        self.mask.validate()?;
        let mut m = self.model.clone();
        m.vision.image_size = self.image_size;
        m.validate()
    }

    /// Resolves a configuration: `user` (a JSON object, typically a config
    /// file) is merged over the preset it names (`"preset"`, default
    /// `full`), then dotted `key=value` overrides are applied. Values parse
    /// as JSON and fall back to strings. Relative paths in `user` are taken
    /// relative to `base_dir`.
    pub fn resolve(stage: Stage, user: Option<Value>, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let mut user = user.unwrap_or_else(|| Value::Object(Default::default()));
        let obj = user.as_object_mut().ok_or_else(|| MissError::Config("config must be a JSON object".into()))?;
        for key in ["pairs", "vqa", "init_ckpt", "resume", "out"] {
            if let Some(Value::String(p)) = obj.get(key) {
                let resolved = if Path::new(p).is_absolute() { PathBuf::from(p) } else { base_dir.join(p) };
                obj.insert(key.into(), Value::String(resolved.to_string_lossy().into_owned()));
            }
        }
        let mut preset = match obj.remove("preset") {
            Some(Value::String(s)) => s,
            None => "full".into(),
            Some(other) => return Err(MissError::Config(format!("preset must be a string, got {other}"))),
        };
        if let Some((_, v)) = overrides.iter().rev().find(|(k, _)| k == "preset") {
            preset = v.clone();
        }
        if let Some(s) = obj.get("stage") {
            if s != stage.name() {
                return Err(MissError::Config(format!("config stage {s} does not match command {}", stage.name())));
            }
        }
        let mut merged = serde_json::to_value(Self::preset(&preset, stage)?)?;
        merge(&mut merged, user);
        for (k, v) in overrides.iter().filter(|(k, _)| k != "preset") {
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
            set_path(&mut merged, k, value)?;
        }
        let mut cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| MissError::Config(e.to_string()))?;
        cfg.model.vision.image_size = cfg.image_size;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, stage: Stage, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MissError::io(path, e))?;
        let user: Value = serde_json::from_str(&text)?;
        Self::resolve(stage, Some(user), overrides, path.parent().unwrap_or(Path::new(".")))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| MissError::Config(format!("'{key}' does not name a config field")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(MissError::Config(format!("unknown config key '{key}'")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).ok_or_else(|| MissError::Config(format!("unknown config key '{key}'")))?;
    }
    Ok(())
}

/// True when two model configs differ at most in input resolution.
pub fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut a = a.clone();
    a.vision.image_size = b.vision.image_size;
    a == *b
}

/// ChaCha stream for one purpose and index under a seed.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | index);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// A pre-training pair after image loading and tokenization.
pub struct PairSample {
    pub image: ImageTensor,
    pub caption: TokenSeq,
}

struct VqaSample {
    image: ImageTensor,
    question: TokenSeq,
    answer: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
}

/// Retrieval and matching accuracy of the online model over a whole pair set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainDiagnostics {
    /// Fraction of images whose most similar caption is their own.
    pub itc_i2t_acc: f64,
    pub itc_t2i_acc: f64,
    /// ITM accuracy over the pairs training sees: every positive, plus for
    /// each image its most similar wrong caption and for each caption its
    /// most similar wrong image (the argmax form of hard-negative sampling).
    pub itm_train_acc: f64,
    /// ITM accuracy over every (image, caption) combination.
    pub itm_grid_acc: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: MissModel,
    pub momentum: ParamStore,
    pub optimizer: AdamW,
    pub queues: ItcQueues,
    /// Global steps completed.
    pub step: u64,
    pub history: Vec<StepLog>,
    pairs: Vec<PairSample>,
    vqa: Vec<VqaSample>,
}

fn build_vocab(config: &TrainConfig) -> Result<Vocab> {
    let mut texts: Vec<String> = Vec::new();
    if let Some(p) = &config.pairs {
        for r in datasets::read_pairs(p)? {
            texts.push(r.caption);
        }
    }
    if let Some(p) = &config.vqa {
        for r in datasets::read_vqa(p)? {
            texts.push(r.question);
            texts.push(r.answer);
        }
    }
    Vocab::build(texts.iter().map(String::as_str), config.vocab_min_freq)
}

impl Trainer {
    pub fn new(mut config: TrainConfig) -> Result<Self> {
        config.model.vision.image_size = config.image_size;
        config.validate()?;
        let d_proj = config.model.d_proj;
        let fresh_state = |model: &MissModel| (model.momentum_params(), AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..Default::default() }));
        let (model, momentum, optimizer, queues, step) = if let Some(dir) = &config.resume {
            let ck = Checkpoint::load(dir)?;
            if ck.config.stage != config.stage || ck.model.config != config.model {
                return Err(MissError::Config(format!("checkpoint {} belongs to a different run configuration", dir.display())));
            }
            (ck.model, ck.momentum, ck.optimizer, ck.queues, ck.step)
        } else if let Some(dir) = &config.init_ckpt {
            let ck = Checkpoint::load(dir)?;
            if !same_architecture(&ck.model.config, &config.model) {
                return Err(MissError::Config(format!("checkpoint {} has a different architecture", dir.display())));
            }
            let mut model = ck.model;
            model.set_image_size(config.image_size)?;
            let (momentum, opt) = fresh_state(&model);
            (model, momentum, opt, ItcQueues::new(config.queue_size, d_proj), 0)
        } else {
            let vocab = build_vocab(&config)?;
            let model = MissModel::new(config.model.clone(), vocab, config.seed, config.temp_init)?;
            let (momentum, opt) = fresh_state(&model);
            (model, momentum, opt, ItcQueues::new(config.queue_size, d_proj), 0)
        };
        config.model = model.config.clone();

        let size = config.image_size;
        let norm = config.normalization;
        let max_len = model.config.max_text_len;
        let mut pairs = Vec::new();
        let mut vqa = Vec::new();
        match config.stage {
            Stage::Pretrain => {
                let path = config.pairs.as_ref().ok_or_else(|| MissError::Config("pre-training needs a pairs manifest".into()))?;
                for r in datasets::read_pairs(path)? {
                    let caption = encode(&r.caption, &model.vocab, Mode::TextCls, max_len)?.trimmed();
                    pairs.push(PairSample { image: ImageTensor::load(&r.image, size, &norm)?, caption });
                }
                if pairs.len() < 2 {
                    return Err(MissError::CannotSampleNegative(pairs.len()));
                }
            }
            Stage::Finetune => {
                let path = config.vqa.as_ref().ok_or_else(|| MissError::Config("fine-tuning needs a VQA manifest".into()))?;
                let mut records = datasets::read_vqa(path)?;
                if let Some(ratios) = config.split {
                    records = datasets::split_vqa(records, ratios, config.seed)?.train;
                }
                for r in records {
                    vqa.push(VqaSample {
                        image: ImageTensor::load(&r.image, size, &norm)?,
                        question: encode(&r.question, &model.vocab, Mode::EncodeQ, max_len)?.trimmed(),
                        answer: encode(&r.answer, &model.vocab, Mode::DecodeA, max_len)?.trimmed(),
                    });
                }
                if vqa.is_empty() {
                    return Err(MissError::EmptyCorpus);
                }
            }
        }
        log::info!("{} config: {}", config.stage.name(), serde_json::to_string(&config)?);
        log::info!("seed {}, {} examples, {} steps", config.seed, pairs.len().max(vqa.len()), config.epochs * batch_count(pairs.len().max(vqa.len()), config.batch_size));
        Ok(Trainer { config, model, momentum, optimizer, queues, step, history: Vec::new(), pairs, vqa })
    }

    /// Loaded pre-training pairs (empty when fine-tuning).
    pub fn pairs(&self) -> &[PairSample] {
        &self.pairs
    }

    pub fn num_examples(&self) -> usize {
        match self.config.stage {
            Stage::Pretrain => self.pairs.len(),
            Stage::Finetune => self.vqa.len(),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        batch_count(self.num_examples(), self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.steps_per_epoch()) as u64
    }

    /// Batches of one epoch. A trailing batch of one example joins the
    /// previous batch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.num_examples()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, SHUFFLE_STREAM, epoch as u64));
        let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        batches
    }

    /// Runs one optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let spe = self.steps_per_epoch();
        let epoch = self.step as usize / spe;
        let batch = self.epoch_batches(epoch).swap_remove(self.step as usize % spe);
        let lr = cosine_lr(self.config.lr, self.step, self.total_steps());
        let mut rng = stream_rng(self.config.seed, STEP_STREAM, self.step);

        let mut g = Graph::new();
        let (loss, parts) = match self.config.stage {
            Stage::Pretrain => pretrain_loss(&mut g, &self.model, &self.momentum, &mut self.queues, &self.config, &self.pairs, &batch, &mut rng)?,
            Stage::Finetune => finetune_loss(&mut g, &self.model, &self.config, &self.vqa, &batch)?,
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(MissError::NonFinite { step: self.step, detail: format!("loss {value}, parts {parts:?}") });
        }
        if !self.config.freeze {
            let grads = g.backward(loss);
            let grads = g.param_grads(&grads);
            if let Some((name, _)) = grads.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
                return Err(MissError::NonFinite { step: self.step, detail: format!("gradient of '{name}'") });
            }
            self.optimizer.step(&mut self.model.params, &grads, lr)?;
            if let Some(t) = self.model.params.get_mut("temp") {
                let [lo, hi] = self.config.temp_range;
                t.mapv_inplace(|v| v.clamp(lo, hi));
            }
            if self.config.stage == Stage::Pretrain {
                objectives::momentum_update(&mut self.momentum, &self.model.params, self.config.momentum)?;
            }
        }
        let log = StepLog { step: self.step, epoch, lr, loss: value, parts };
        log::debug!("step {} epoch {} lr {:.3e} loss {:.6}", log.step, log.epoch, lr, value);
        self.step += 1;
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            momentum: self.momentum.clone(),
            optimizer: self.optimizer.clone(),
            queues: self.queues.clone(),
            step: self.step,
        }
    }

    pub fn save(&self) -> Result<()> {
        log::info!("saving checkpoint at step {} to {}", self.step, self.config.out.display());
        self.checkpoint().save(&self.config.out)
    }

    /// Trains until the schedule ends (or `max_steps`), saving at the
    /// configured epoch cadence and after the last step.
    pub fn run(&mut self) -> Result<Checkpoint> {
        let total = self.total_steps();
        let stop = self.config.max_steps.map_or(total, |m| m.min(total));
        let spe = self.steps_per_epoch() as u64;
        let every = self.config.checkpoint_every as u64;
        while self.step < stop {
            let log = self.train_step()?;
            self.history.push(log);
            let epoch_end = self.step % spe == 0;
            if (epoch_end && (self.step / spe) % every == 0) || self.step == stop {
                self.save()?;
            }
        }
        if self.history.is_empty() {
            self.save()?;
        }
        Ok(self.checkpoint())
    }

    pub fn pretrain_diagnostics(&self) -> Result<PretrainDiagnostics> {
        let images: Vec<&ImageTensor> = self.pairs.iter().map(|p| &p.image).collect();
        let captions: Vec<&TokenSeq> = self.pairs.iter().map(|p| &p.caption).collect();
        pretrain_diagnostics(&self.model, &images, &captions)
    }
}

fn batch_count(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full.max(1)
    }
}

#[allow(clippy::too_many_arguments)]
fn pretrain_loss(
    g: &mut Graph,
    model: &MissModel,
    momentum: &ParamStore,
    queues: &mut ItcQueues,
    config: &TrainConfig,
    pairs: &[PairSample],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, BTreeMap<String, f64>)> {
    let (ps, cfg) = (&model.params, &model.config);
    let mut vis = Vec::with_capacity(batch.len());
    let mut cls_v = Vec::with_capacity(batch.len());
    let mut cls_t = Vec::with_capacity(batch.len());
    for &i in batch {
        let v = vision::encode_image(g, ps, &cfg.vision, &pairs[i].image)?;
        let t = jtm::encode_text(g, ps, cfg, &pairs[i].caption)?;
        cls_v.push(g.slice_rows(v, 0, 1));
        cls_t.push(g.slice_rows(t, 0, 1));
        vis.push(v);
    }
    let cv = g.concat_rows(&cls_v);
    let ct = g.concat_rows(&cls_t);
    let image_feat = jtm::project(g, ps, "proj.vision", cv)?;
    let text_feat = jtm::project(g, ps, "proj.text", ct)?;

    let (im, tm) = momentum_features(momentum, cfg, batch.iter().map(|&i| (&pairs[i].image, &pairs[i].caption)))?;
    let image_m = g.constant(im);
    let text_m = g.constant(tm);
    let temp = g.param(ps, "temp")?;
    let itc = objectives::itc_loss(g, &ItcInputs { image: image_feat, text: text_feat, image_m, text_m, temp }, queues)?;

    let t = g.scalar(temp);
    let sim = g.value(image_feat).dot(&g.value(text_feat).t()) / t;
    let neg = objectives::sample_negatives(&sim, rng, config.negatives)?;
    let b = batch.len();
    let mut joint = Vec::with_capacity(3 * b);
    let mut labels = Vec::with_capacity(3 * b);
    for (k, &i) in batch.iter().enumerate() {
        let f = jtm::encode_fusion(g, ps, cfg, &pairs[i].caption, vis[k])?;
        joint.push(g.slice_rows(f, 0, 1));
        labels.push(1);
    }
    for (k, &i) in batch.iter().enumerate() {
        let f = jtm::encode_fusion(g, ps, cfg, &pairs[batch[neg.text_for_image[k]]].caption, vis[k])?;
        joint.push(g.slice_rows(f, 0, 1));
        labels.push(0);
        let f = jtm::encode_fusion(g, ps, cfg, &pairs[i].caption, vis[neg.image_for_text[k]])?;
        joint.push(g.slice_rows(f, 0, 1));
        labels.push(0);
    }
    let joint = g.concat_rows(&joint);
    let itm = objectives::itm_loss(g, ps, joint, &labels)?;

    let captions: Vec<TokenSeq> = batch.iter().map(|&i| pairs[i].caption.clone()).collect();
    let masked = mask_batch(&captions, &model.vocab, rng, &config.mask)?;
    let ctx: Vec<CtxVar> = vis.iter().map(|&v| CtxVar::unmasked(g, v)).collect();
    let mlm = objectives::mlm_loss(g, ps, cfg, &masked, &ctx)?;

    let w = config.loss_weights;
    let a = g.scale(itc.loss, w.itc);
    let bm = g.scale(itm.loss, w.itm);
    let c = g.scale(mlm.loss, w.mlm);
    let ab = g.add(a, bm);
    let total = g.add(ab, c);
    let parts = BTreeMap::from([
        ("itc".to_string(), g.scalar(itc.loss)),
        ("itm".to_string(), g.scalar(itm.loss)),
        ("mlm".to_string(), g.scalar(mlm.loss)),
    ]);
    Ok((total, parts))
}

/// Momentum-encoder projections for a batch, computed off the tape.
fn momentum_features<'a>(momentum: &ParamStore, cfg: &ModelConfig, items: impl Iterator<Item = (&'a ImageTensor, &'a TokenSeq)>) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::inference();
    let mut cv = Vec::new();
    let mut ct = Vec::new();
    for (img, cap) in items {
        let v = vision::encode_image(&mut g, momentum, &cfg.vision, img)?;
        let t = jtm::encode_text(&mut g, momentum, cfg, cap)?;
        cv.push(g.slice_rows(v, 0, 1));
        ct.push(g.slice_rows(t, 0, 1));
    }
    let cv = g.concat_rows(&cv);
    let ct = g.concat_rows(&ct);
    let iv = jtm::project(&mut g, momentum, "proj.vision", cv)?;
    let tv = jtm::project(&mut g, momentum, "proj.text", ct)?;
    Ok((g.value(iv).clone(), g.value(tv).clone()))
}

fn finetune_loss(g: &mut Graph, model: &MissModel, config: &TrainConfig, vqa: &[VqaSample], batch: &[usize]) -> Result<(Var, BTreeMap<String, f64>)> {
    let (ps, cfg) = (&model.params, &model.config);
    let mut ctx = Vec::with_capacity(batch.len());
    let mut answers = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &vqa[i];
        let v = vision::encode_image(g, ps, &cfg.vision, &s.image)?;
        ctx.push(match config.decoder_context {
            ContextKind::Image => CtxVar::unmasked(g, v),
            ContextKind::Joint => {
                let f = jtm::encode_fusion(g, ps, cfg, &s.question, v)?;
                CtxVar { var: f, mask: s.question.key_mask() }
            }
        });
        answers.push(s.answer.clone());
    }
    let loss = objectives::lm_loss(g, ps, cfg, &answers, &ctx)?;
    let parts = BTreeMap::from([("lm".to_string(), g.scalar(loss))]);
    Ok((loss, parts))
}

/// In-set ITC retrieval and full-grid ITM accuracy of the online model.
pub fn pretrain_diagnostics(model: &MissModel, images: &[&ImageTensor], captions: &[&TokenSeq]) -> Result<PretrainDiagnostics> {
    let n = images.len();
    if n == 0 || captions.len() != n {
        return Err(MissError::InvalidArgument("diagnostics need matching, non-empty image and caption lists".into()));
    }
    let (ps, cfg) = (&model.params, &model.config);
    let mut g = Graph::inference();
    let mut vis = Vec::with_capacity(n);
    let mut cv = Vec::with_capacity(n);
    let mut ct = Vec::with_capacity(n);
    for (img, cap) in images.iter().zip(captions) {
        let v = vision::encode_image(&mut g, ps, &cfg.vision, img)?;
        let t = jtm::encode_text(&mut g, ps, cfg, cap)?;
        cv.push(g.slice_rows(v, 0, 1));
        ct.push(g.slice_rows(t, 0, 1));
        vis.push(v);
    }
    let cv = g.concat_rows(&cv);
    let ct = g.concat_rows(&ct);
    let iv = jtm::project(&mut g, ps, "proj.vision", cv)?;
    let tv = jtm::project(&mut g, ps, "proj.text", ct)?;
    let sim = g.value(iv).dot(&g.value(tv).t());
    let argmax = |row: ndarray::ArrayView1<'_, f64>| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
    let i2t = (0..n).filter(|&i| argmax(sim.row(i)) == i).count();
    let t2i = (0..n).filter(|&j| argmax(sim.column(j)) == j).count();

    let mut matched = vec![vec![false; n]; n];
    for (i, &v) in vis.iter().enumerate() {
        for (j, cap) in captions.iter().enumerate() {
            let f = jtm::encode_fusion(&mut g, ps, cfg, cap, v)?;
            let cls = g.slice_rows(f, 0, 1);
            let logits = crate::nn::linear(&mut g, ps, "itm", cls)?;
            let l = g.value(logits);
            matched[i][j] = l[[0, 1]] > l[[0, 0]];
        }
    }
    let grid = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| matched[i][j] == (i == j)).count();

    let mut train = vec![(0..n).filter(|&i| matched[i][i]).count(), 0];
    let hardest = |scores: &mut dyn Iterator<Item = (usize, f64)>, own: usize| {
        scores.filter(|&(k, _)| k != own).fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
    };
    for i in 0..n {
        if let Some((j, _)) = hardest(&mut sim.row(i).iter().copied().enumerate(), i) {
            train[1] += 1;
            train[0] += usize::from(!matched[i][j]);
        }
        if let Some((k, _)) = hardest(&mut sim.column(i).iter().copied().enumerate(), i) {
            train[1] += 1;
            train[0] += usize::from(!matched[k][i]);
        }
    }
    Ok(PretrainDiagnostics {
        itc_i2t_acc: i2t as f64 / n as f64,
        itc_t2i_acc: t2i as f64 / n as f64,
        itm_train_acc: train[0] as f64 / (n + train[1]) as f64,
        itm_grid_acc: grid as f64 / (n * n) as f64,
    })
}

pub fn pretrain(config: TrainConfig) -> Result<Checkpoint> {
    if config.stage != Stage::Pretrain {
        return Err(MissError::Config("pretrain needs a pretrain-stage config".into()));
    }
    Trainer::new(config)?.run()
}

pub fn finetune(config: TrainConfig) -> Result<Checkpoint> {
    if config.stage != Stage::Finetune {
        return Err(MissError::Config("finetune needs a finetune-stage config".into()));
    }
    if config.init_ckpt.is_none() && config.resume.is_none() {
        log::warn!("fine-tuning without a pre-trained checkpoint; starting from random weights");
    }
    Trainer::new(config)?.run()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub strategy: Strategy,
    /// Restricts closed questions to a one-token `yes`/`no` answer.
    pub constrain_closed: bool,
    pub max_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { strategy: Strategy::Greedy, constrain_closed: true, max_len: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub prediction: String,
    pub answer_type: AnswerType,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closed_acc: Option<f64>,
    pub open_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    pub closed_n: usize,
    pub open_n: usize,
    pub predictions: Vec<Prediction>,
}

/// Generation options used for a question of the given type.
pub fn generation_options(vocab: &Vocab, answer_type: Option<AnswerType>, opts: &EvalOptions) -> GenerateOptions {
    let base = GenerateOptions { strategy: opts.strategy, max_len: opts.max_len, ..Default::default() };
    if answer_type == Some(AnswerType::Closed) && opts.constrain_closed && vocab.contains("yes") && vocab.contains("no") {
        GenerateOptions { allowed: Some(vec![vocab.id("yes"), vocab.id("no")]), min_len: 1, max_len: 1, ..base }
    } else {
        base
    }
}

/// Generates an answer for every record and scores them.
pub fn evaluate(model: &MissModel, context: ContextKind, norm: &Normalization, records: &[VqaRecord], opts: &EvalOptions) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(MissError::EmptyCorpus);
    }
    let size = model.config.vision.image_size;
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        let img = ImageTensor::load(&r.image, size, norm)?;
        let gen = generation_options(&model.vocab, Some(r.answer_type), opts);
        let prediction = model.answer(&img, &r.question, context, &gen)?;
        predictions.push(Prediction {
            id: r.id.clone(),
            question: r.question.clone(),
            answer: r.answer.clone(),
            correct: datasets::is_correct(&prediction, r),
            prediction,
            answer_type: r.answer_type,
        });
    }
    let pairs: Vec<(String, String)> = predictions.iter().map(|p| (p.id.clone(), p.prediction.clone())).collect();
    let acc = datasets::eval_accuracy(&pairs, records)?;
    Ok(EvalReport { closed_acc: acc.closed_acc, open_acc: acc.open_acc, overall_acc: acc.overall_acc, closed_n: acc.closed_n, open_n: acc.open_n, predictions })
}

pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let records = datasets::read_vqa(manifest)?;
    evaluate(&ck.model, ck.config.decoder_context, &ck.config.normalization, &records, opts)
}

/// Answers one free-form question about an image file with a trained checkpoint.
pub fn answer_question(ck: &Checkpoint, image: &Path, question: &str, strategy: Strategy) -> Result<String> {
    let img = ImageTensor::load(image, ck.model.config.vision.image_size, &ck.config.normalization)?;
    let opts = GenerateOptions { strategy, ..Default::default() };
    ck.model.answer(&img, question, ck.config.decoder_context, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_counts() {
        assert_eq!(batch_count(8, 8), 1);
        assert_eq!(batch_count(9, 8), 1);
        assert_eq!(batch_count(10, 8), 2);
        assert_eq!(batch_count(1, 8), 1);
        assert_eq!(batch_count(16, 8), 2);
    }

    #[test]
    fn overrides_and_presets() {
        let cfg = TrainConfig::resolve(
            Stage::Finetune,
            Some(serde_json::json!({"preset": "desk", "lr": 0.01})),
            &[("epochs".into(), "7".into()), ("model.jtm.depth".into(), "3".into())],
            Path::new("/tmp"),
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.model.jtm.depth, 3);
        assert_eq!(cfg.image_size, 48);
        assert!(TrainConfig::resolve(Stage::Pretrain, None, &[("nope".into(), "1".into())], Path::new(".")).is_err());
        assert!(TrainConfig::resolve(Stage::Pretrain, Some(serde_json::json!({"stage": "finetune"})), &[], Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = TrainConfig::resolve(Stage::Pretrain, Some(serde_json::json!({"pairs": "d/pairs.jsonl"})), &[], Path::new("/base")).unwrap();
        assert_eq!(cfg.pairs.unwrap(), PathBuf::from("/base/d/pairs.jsonl"));
    }
}
