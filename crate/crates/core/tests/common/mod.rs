#![allow(dead_code)]

pub mod grad_cases;
pub mod oracles;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use miss::graph::Tensor;
use miss::model::{MissModel, ModelConfig, StackConfig};
use miss::tokenization::Vocab;
use miss::vision::{EncoderConfig, ImageTensor};

/// Width-8 model with one layer per stack, for finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vision: EncoderConfig { depth: 1, d: 8, heads: 2, ffn_dim: 16, patch_size: 4, image_size: 8 },
        jtm: StackConfig { depth: 1, heads: 2, ffn_dim: 16 },
        decoder: StackConfig { depth: 1, heads: 2, ffn_dim: 16 },
        max_text_len: 8,
        d_proj: 4,
        dual_tower: false,
        learned_cross_bias: false,
        init_std: 0.3,
    }
}

pub fn tiny_vocab() -> Vocab {
    Vocab::build(["a red circle in the upper left", "is there a blue square", "yes no green triangle"], 1).unwrap()
}

pub fn tiny_model(seed: u64) -> MissModel {
    MissModel::new(tiny_config(), tiny_vocab(), seed, 0.07).unwrap()
}

pub fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(Array3::from_shape_fn((3, size, size), |_| rng.random_range(-1.0..1.0))).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Rows scaled to unit length.
pub fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    out
}
