//! Model configuration and the assembled parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, ContextKind, DecoderContext, GenerateOptions};
use crate::error::{MissError, Result};
use crate::graph::{Graph, Tensor};
use crate::jtm;
use crate::params::{Init, ParamStore};
use crate::tokenization::{encode, Mode, Vocab};
use crate::vision::{self, EncoderConfig, ImageTensor};

/// Depth and width of a text-side transformer stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: EncoderConfig,
    pub jtm: StackConfig,
    pub decoder: StackConfig,
    /// Positional table length for text, shared by encoder and decoder.
    pub max_text_len: usize,
    /// Width of the contrastive projection space.
    pub d_proj: usize,
    /// Splits the JTM stack into a text-only lower half and a fusion upper half.
    pub dual_tower: bool,
    /// Adds a learned `[1, n+1]` bias to cross-attention scores.
    pub learned_cross_bias: bool,
    pub init_std: f64,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            vision: EncoderConfig::desk(),
            jtm: StackConfig { depth: 2, heads: 4, ffn_dim: 256 },
            decoder: StackConfig { depth: 2, heads: 4, ffn_dim: 256 },
            max_text_len: 24,
            d_proj: 32,
            dual_tower: false,
            learned_cross_bias: false,
            init_std: 0.15,
        }
    }

    /// 12-layer ViT-Base / BERT-Base sized stacks.
    pub fn base() -> Self {
        ModelConfig {
            vision: EncoderConfig::base(),
            jtm: StackConfig { depth: 12, heads: 12, ffn_dim: 3072 },
            decoder: StackConfig { depth: 12, heads: 12, ffn_dim: 3072 },
            max_text_len: 40,
            d_proj: 256,
            dual_tower: false,
            learned_cross_bias: false,
            init_std: 0.02,
        }
    }

    pub fn d(&self) -> usize {
        self.vision.d
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        for (name, s) in [("jtm", &self.jtm), ("decoder", &self.decoder)] {
            if s.depth == 0 || s.heads == 0 || self.d() % s.heads != 0 {
                return Err(MissError::Config(format!("{name}: depth must be >= 1 and d divisible by heads")));
            }
        }
        if self.dual_tower && self.jtm.depth < 2 {
            return Err(MissError::Config("dual_tower needs a JTM depth of at least 2".into()));
        }
        if self.max_text_len < 2 || self.d_proj == 0 {
            return Err(MissError::Config("max_text_len must be >= 2 and d_proj >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters shadowed by the momentum encoders.
pub const MOMENTUM_PREFIXES: [&str; 4] = ["vision.", "text.", "jtm.", "proj."];

/// Online parameters, vocabulary and architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct MissModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
}

impl MissModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64, temp_init: f64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d();
        {
            let mut init = Init { store: &mut params, rng: &mut rng, std: config.init_std };
            vision::init_params(&mut init, &config.vision);
            jtm::init_params(&mut init, &config, vocab.len());
            decoder::init_params(&mut init, &config, vocab.len());
            init.linear("proj.vision", d, config.d_proj);
            init.linear("proj.text", d, config.d_proj);
            init.linear("itm", d, 2);
            init.fill("temp".into(), 1, 1, temp_init);
        }
        Ok(MissModel { config, params, vocab })
    }

    pub fn momentum_params(&self) -> ParamStore {
        self.params.subset(&MOMENTUM_PREFIXES)
    }

    /// Switches the vision encoder to `image_size`, resampling positional
    /// embeddings and resetting any learned cross-attention bias.
    pub fn set_image_size(&mut self, image_size: usize) -> Result<()> {
        let old = self.config.vision.clone();
        if old.image_size == image_size {
            return Ok(());
        }
        let mut new = old.clone();
        new.image_size = image_size;
        new.validate()?;
        let pos = self.params.expect("vision.pos")?;
        let resampled = vision::interpolate_positions(pos, old.grid(), new.grid())?;
        self.params.insert("vision.pos", resampled);
        if self.config.learned_cross_bias {
            for i in 0..self.config.jtm.depth {
                let name = format!("jtm.layers.{i}.cross_attn.bias");
                if self.params.contains(&name) {
                    self.params.insert(name, Tensor::zeros((1, new.num_patches() + 1)));
                }
            }
        }
        self.config.vision = new;
        Ok(())
    }

    pub fn image_embeddings(&self, img: &ImageTensor) -> Result<Tensor> {
        Ok(vision::embed_image(&self.params, &self.config.vision, img)?.0)
    }

    /// Decoder context for a question about `img` (`Joint`), or the image
    /// embeddings alone (`Image`).
    pub fn answer_context(&self, img: &ImageTensor, question: &str, kind: ContextKind) -> Result<DecoderContext> {
        let mut g = Graph::inference();
        let v = vision::encode_image(&mut g, &self.params, &self.config.vision, img)?;
        match kind {
            ContextKind::Image => Ok(DecoderContext::image(g.value(v).clone())),
            ContextKind::Joint => {
                let q = encode(question, &self.vocab, Mode::EncodeQ, self.config.max_text_len)?.trimmed();
                let f = jtm::encode_fusion(&mut g, &self.params, &self.config, &q, v)?;
                Ok(DecoderContext::joint(g.value(f).clone(), &q))
            }
        }
    }

    /// Generates a free-text answer.
    pub fn answer(&self, img: &ImageTensor, question: &str, kind: ContextKind, opts: &GenerateOptions) -> Result<String> {
        let ctx = self.answer_context(img, question, kind)?;
        decoder::generate(&self.params, &self.config, &self.vocab, &ctx, opts)
    }
}
