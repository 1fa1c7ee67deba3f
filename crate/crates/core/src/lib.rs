//! Generative medical visual question answering.
//!
//! The model has three parts: a patch-embedding vision transformer, a joint
//! text-multimodal (JTM) encoder that serves both as text encoder and as
//! image-text fusion encoder, and a causal text decoder that generates
//! answers. Pre-training combines image-text contrastive, image-text
//! matching and masked-token objectives; fine-tuning trains the decoder on
//! answers conditioned on the fused question/image feature.
//!
//! [`transcap`] turns attribute-labelled images (classification datasets
//! and the like) into image-caption pairs, and [`datasets`] provides
//! manifests, a synthetic shapes corpus and accuracy evaluation.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod jtm;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tokenization;
pub mod trainer;
pub mod transcap;
pub mod vision;

pub use error::{MissError, Result};
