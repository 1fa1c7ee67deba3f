//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! config.json      training configuration snapshot (includes the model config)
//! manifest.json    step, optimizer scalars, queue state and tensor index
//! vocab.txt        one token per line, specials first
//! params/          online parameters
//! momentum/        momentum-encoder parameters
//! optim/m, optim/v AdamW moments
//! queues/          ITC feature queues
//! ```
//!
//! Every tensor is a raw little-endian `f64` blob in row-major order. The
//! files carry no timestamps, so identical training state gives identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};
use crate::graph::Tensor;
use crate::model::MissModel;
use crate::objectives::{FeatureQueue, ItcQueues};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tokenization::Vocab;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: MissModel,
    pub momentum: ParamStore,
    pub optimizer: AdamW,
    pub queues: ItcQueues,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct QueueEntry {
    file: String,
    capacity: usize,
    dim: usize,
    head: usize,
    fill: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    step: u64,
    vocab: String,
    params: Vec<TensorEntry>,
    momentum: Vec<TensorEntry>,
    optimizer: OptimEntry,
    queues: BTreeMap<String, QueueEntry>,
}

#[derive(Serialize, Deserialize)]
struct OptimEntry {
    config: AdamWConfig,
    t: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

fn write_tensor(dir: &Path, sub: &str, name: &str, t: &Tensor) -> Result<TensorEntry> {
    let file = format!("{sub}/{name}.bin");
    let path = dir.join(&file);
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| MissError::io(&path, e))?;
    Ok(TensorEntry { name: name.to_string(), rows: t.nrows(), cols: t.ncols(), file })
}

fn read_tensor(dir: &Path, file: &str, rows: usize, cols: usize) -> Result<Tensor> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| MissError::io(&path, e))?;
    if bytes.len() != rows * cols * 8 {
        return Err(MissError::Checkpoint(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), rows * cols * 8)));
    }
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::from_shape_vec((rows, cols), data).map_err(|e| MissError::Checkpoint(e.to_string()))
}

fn write_store<'a>(dir: &Path, sub: &str, items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<TensorEntry>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d).map_err(|e| MissError::io(&d, e))?;
    items.map(|(n, t)| write_tensor(dir, sub, n, t)).collect()
}

fn read_entries(dir: &Path, entries: &[TensorEntry]) -> Result<BTreeMap<String, Tensor>> {
    entries.iter().map(|e| Ok((e.name.clone(), read_tensor(dir, &e.file, e.rows, e.cols)?))).collect()
}

fn to_store(map: BTreeMap<String, Tensor>) -> ParamStore {
    let mut ps = ParamStore::new();
    for (k, v) in map {
        ps.insert(k, v);
    }
    ps
}

/// Clears `dir` for a new save. Only directories that are empty or hold a
/// previous checkpoint are touched.
fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| MissError::io(dir, e))?.next().is_none();
        if !empty && !dir.join("manifest.json").is_file() {
            return Err(MissError::Checkpoint(format!("{} exists and is not a checkpoint directory", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| MissError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| MissError::io(dir, e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        prepare_dir(dir)?;
        let config_path = dir.join("config.json");
        fs::write(&config_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| MissError::io(&config_path, e))?;
        self.model.vocab.save(&dir.join("vocab.txt"))?;
        let params = write_store(dir, "params", self.model.params.iter())?;
        let momentum = write_store(dir, "momentum", self.momentum.iter())?;
        let m = write_store(dir, "optim/m", self.optimizer.m.iter().map(|(k, v)| (k.as_str(), v)))?;
        let v = write_store(dir, "optim/v", self.optimizer.v.iter().map(|(k, v)| (k.as_str(), v)))?;
        let qdir = dir.join("queues");
        fs::create_dir_all(&qdir).map_err(|e| MissError::io(&qdir, e))?;
        let mut queues = BTreeMap::new();
        for (name, q) in [("image", &self.queues.image), ("text", &self.queues.text)] {
            let e = write_tensor(dir, "queues", name, q.raw_buffer())?;
            queues.insert(name.to_string(), QueueEntry { file: e.file, capacity: q.capacity(), dim: q.dim(), head: q.head(), fill: q.len() });
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            step: self.step,
            vocab: "vocab.txt".into(),
            params,
            momentum,
            optimizer: OptimEntry { config: self.optimizer.config, t: self.optimizer.t, m, v },
            queues,
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| MissError::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| MissError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_VERSION {
            return Err(MissError::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let cpath = dir.join("config.json");
        let ctext = fs::read_to_string(&cpath).map_err(|e| MissError::io(&cpath, e))?;
        let config: TrainConfig = serde_json::from_str(&ctext)?;
        let vocab = Vocab::load(&dir.join(&manifest.vocab))?;
        let params = to_store(read_entries(dir, &manifest.params)?);
        let model = MissModel { config: config.model.clone(), params, vocab };
        let momentum = to_store(read_entries(dir, &manifest.momentum)?);
        let optimizer = AdamW {
            config: manifest.optimizer.config,
            t: manifest.optimizer.t,
            m: read_entries(dir, &manifest.optimizer.m)?,
            v: read_entries(dir, &manifest.optimizer.v)?,
        };
        let queue = |name: &str| -> Result<FeatureQueue> {
            let e = manifest.queues.get(name).ok_or_else(|| MissError::Checkpoint(format!("missing queue '{name}'")))?;
            FeatureQueue::from_parts(read_tensor(dir, &e.file, e.capacity, e.dim)?, e.head, e.fill)
        };
        let queues = ItcQueues { image: queue("image")?, text: queue("text")? };
        Ok(Checkpoint { config, model, momentum, optimizer, queues, step: manifest.step })
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot_files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| MissError::io(dir, e))? {
            let path = entry.map_err(|e| MissError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let bytes = fs::read(&path).map_err(|e| MissError::io(&path, e))?;
                out.insert(path.strip_prefix(root).expect("walked path is under root").to_path_buf(), bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
