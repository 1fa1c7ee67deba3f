//! Manifests, the synthetic shapes corpus and answer accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};
use crate::transcap::{self, CaptionBackend, DatasetAdapter, DatasetRow, EmitOptions, SubsetPolicy};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub image: PathBuf,
    pub caption: String,
    /// Present when the manifest was produced by TransCap.
    pub attributes: Option<IndexMap<String, String>>,
    pub line: usize,
}

#[derive(Deserialize)]
struct RawPair {
    image: Option<String>,
    caption: Option<String>,
    #[serde(default)]
    attributes: Option<IndexMap<String, String>>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> MissError {
    MissError::Manifest { path: path.to_path_buf(), line, message: message.into() }
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Non-blank lines of a JSON-lines file with 1-based line numbers.
fn json_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>>> {
    let file = fs::File::open(path).map_err(|e| MissError::io(path, e))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(file).lines().enumerate().filter_map(move |(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(MissError::io(&path, e))),
    }))
}

/// Streams pair records. Image paths are resolved against the manifest's
/// directory and must exist.
pub fn load_pairs(path: &Path) -> Result<impl Iterator<Item = Result<PairRecord>>> {
    let base = manifest_base(path);
    let owned = path.to_path_buf();
    Ok(json_lines(path)?.map(move |item| {
        let (line, text) = item?;
        let raw: RawPair = serde_json::from_str(&text).map_err(|e| manifest_err(&owned, line, e.to_string()))?;
        let image = raw.image.ok_or_else(|| manifest_err(&owned, line, "missing field \"image\""))?;
        let caption = raw.caption.ok_or_else(|| manifest_err(&owned, line, "missing field \"caption\""))?;
        if caption.trim().is_empty() {
            return Err(manifest_err(&owned, line, "empty caption"));
        }
        let image = resolve(&base, &image);
        if !image.is_file() {
            return Err(manifest_err(&owned, line, format!("image not found: {}", image.display())));
        }
        Ok(PairRecord { image, caption, attributes: raw.attributes, line })
    }))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    load_pairs(path)?.collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Closed,
    Open,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaRecord {
    pub id: String,
    pub image: PathBuf,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
}

/// On-disk VQA line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
}

/// Reads VQA triples. Records without an `id` get `line-<n>`.
pub fn read_vqa(path: &Path) -> Result<Vec<VqaRecord>> {
    let base = manifest_base(path);
    let mut out = Vec::new();
    for item in json_lines(path)? {
        let (line, text) = item?;
        let raw: VqaLine = serde_json::from_str(&text).map_err(|e| manifest_err(path, line, e.to_string()))?;
        match raw.answer_type {
            AnswerType::Closed if closed_answer(&raw.answer).is_none() => {
                return Err(manifest_err(path, line, format!("closed answer '{}' is not yes/no", raw.answer)));
            }
            AnswerType::Open if normalize_answer(&raw.answer).is_empty() => return Err(manifest_err(path, line, "empty open answer")),
            _ => {}
        }
        let image = resolve(&base, &raw.image);
        if !image.is_file() {
            return Err(manifest_err(path, line, format!("image not found: {}", image.display())));
        }
        out.push(VqaRecord {
            id: raw.id.unwrap_or_else(|| format!("line-{line}")),
            image,
            question: raw.question,
            answer: raw.answer,
            answer_type: raw.answer_type,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VqaSplits {
    pub train: Vec<VqaRecord>,
    pub val: Vec<VqaRecord>,
    pub test: Vec<VqaRecord>,
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the
/// lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| if sum > 0.0 { total as f64 * w / sum } else { 0.0 }).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).partial_cmp(&(quotas[a] - quotas[a].floor())).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Shuffled train/val/test split, stratified by answer type. Split sizes
/// are the largest-remainder rounding of `ratios`; every split holds each
/// answer type within one record of its global share.
pub fn split_vqa(records: Vec<VqaRecord>, ratios: [f64; 3], seed: u64) -> Result<VqaSplits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(MissError::InvalidArgument(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let n = records.len();
    let split_sizes = apportion(n, &ratios);
    let mut groups: BTreeMap<AnswerType, Vec<VqaRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.answer_type).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<VqaRecord>; 3] = Default::default();
    let mut remaining = split_sizes.clone();
    let kinds: Vec<AnswerType> = groups.keys().copied().collect();
    for (gi, kind) in kinds.iter().enumerate() {
        let mut items = groups.remove(kind).unwrap_or_default();
        items.shuffle(&mut rng);
        // the last group takes what is left so split totals stay exact
        let counts = if gi + 1 == kinds.len() {
            remaining.clone()
        } else {
            let w: Vec<f64> = split_sizes.iter().map(|&s| s as f64).collect();
            apportion(items.len(), &w)
        };
        let mut it = items.into_iter();
        for s in 0..3 {
            splits[s].extend(it.by_ref().take(counts[s]));
            remaining[s] -= counts[s];
        }
    }
    for s in splits.iter_mut() {
        s.shuffle(&mut rng);
    }
    let [train, val, test] = splits;
    Ok(VqaSplits { train, val, test })
}

pub fn load_vqa(path: &Path, ratios: [f64; 3], seed: u64) -> Result<VqaSplits> {
    split_vqa(read_vqa(path)?, ratios, seed)
}

/// Lowercases, turns punctuation into spaces, drops articles and collapses
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s.to_lowercase().chars().map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' }).collect();
    cleaned.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

/// `yes`/`no` for a closed answer, accepting common synonyms.
pub fn closed_answer(s: &str) -> Option<&'static str> {
    let n = normalize_answer(s);
    let first = n.split(' ').next().unwrap_or("");
    match first {
        "yes" | "y" | "yeah" | "yep" | "true" | "correct" => Some("yes"),
        "no" | "n" | "nope" | "false" | "not" | "incorrect" => Some("no"),
        _ => None,
    }
}

/// Open-answer rule: exact match after normalization, or the reference
/// appearing as a whole-token run inside the prediction.
pub fn open_match(prediction: &str, reference: &str) -> bool {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    if r.is_empty() {
        return false;
    }
    p == r || format!(" {p} ").contains(&format!(" {r} "))
}

pub fn is_correct(prediction: &str, reference: &VqaRecord) -> bool {
    match reference.answer_type {
        AnswerType::Closed => closed_answer(prediction).is_some() && closed_answer(prediction) == closed_answer(&reference.answer),
        AnswerType::Open => open_match(prediction, &reference.answer),
    }
}

/// Accuracies are `None` when no reference of that type exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub closed_acc: Option<f64>,
    pub open_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    pub closed_n: usize,
    pub open_n: usize,
}

pub fn eval_accuracy(predictions: &[(String, String)], refs: &[VqaRecord]) -> Result<Accuracy> {
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(predictions.len());
    for (id, p) in predictions {
        if by_id.insert(id.as_str(), p.as_str()).is_some() {
            return Err(MissError::InvalidArgument(format!("duplicate prediction for id '{id}'")));
        }
    }
    let (mut closed, mut open) = ((0usize, 0usize), (0usize, 0usize));
    for r in refs {
        let p = by_id.get(r.id.as_str()).ok_or_else(|| MissError::MissingPrediction(r.id.clone()))?;
        let hit = is_correct(p, r) as usize;
        match r.answer_type {
            AnswerType::Closed => closed = (closed.0 + hit, closed.1 + 1),
            AnswerType::Open => open = (open.0 + hit, open.1 + 1),
        }
    }
    let ratio = |(h, n): (usize, usize)| (n > 0).then(|| h as f64 / n as f64);
    Ok(Accuracy {
        closed_acc: ratio(closed),
        open_acc: ratio(open),
        overall_acc: ratio((closed.0 + open.0, closed.1 + open.1)),
        closed_n: closed.1,
        open_n: open.1,
    })
}

/// Parameters of the synthetic shapes corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub image_size: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub locations: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SyntheticSpec {
            n: 8,
            image_size: 64,
            shapes: v(&["circle", "square", "triangle"]),
            colors: v(&["red", "green", "blue", "yellow"]),
            sizes: v(&["small", "large"]),
            locations: v(&["upper left", "upper right", "lower left", "lower right"]),
            seed: 0,
        }
    }
}

/// Ground truth behind one synthetic image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub shape: String,
    pub color: String,
    pub size: String,
    pub location: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthOutput {
    pub pairs: PathBuf,
    pub vqa: PathBuf,
    pub attrs: PathBuf,
    pub scenes: Vec<ShapeScene>,
}

fn color_rgb(name: &str) -> Rgb<u8> {
    match name {
        "red" => Rgb([220, 40, 40]),
        "green" => Rgb([40, 190, 60]),
        "blue" => Rgb([50, 80, 230]),
        "yellow" => Rgb([235, 215, 40]),
        "white" => Rgb([245, 245, 245]),
        "purple" => Rgb([150, 60, 200]),
        "orange" => Rgb([245, 140, 30]),
        other => {
            // stable colour for names outside the built-in palette
            let h = other.bytes().fold(0u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
            Rgb([(h & 0xff) as u8 | 0x40, ((h >> 8) & 0xff) as u8 | 0x40, ((h >> 16) & 0xff) as u8 | 0x40])
        }
    }
}

/// Draws one scene on a dark background. Locations name image quadrants
/// (`upper`/`lower`, `left`/`right`); anything else is centred.
pub fn render_scene(scene: &ShapeScene, size: usize) -> RgbImage {
    let s = size as f64;
    let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb([20, 20, 20]));
    let cx = if scene.location.contains("left") {
        s * 0.25
    } else if scene.location.contains("right") {
        s * 0.75
    } else {
        s * 0.5
    };
    let cy = if scene.location.contains("upper") {
        s * 0.25
    } else if scene.location.contains("lower") {
        s * 0.75
    } else {
        s * 0.5
    };
    let r = if scene.size == "small" { s * 0.09 } else { s * 0.2 };
    let color = color_rgb(&scene.color);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match scene.shape.as_str() {
                "circle" => px * px + py * py <= r * r,
                "square" => px.abs() <= r && py.abs() <= r,
                "triangle" => py >= -r && py <= r && px.abs() <= (py + r) / 2.0,
                _ => px.abs() <= r && py.abs() <= r * 0.5,
            };
            if inside {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    img
}

fn choose_scenes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<ShapeScene> {
    let mut combos = Vec::new();
    for shape in &spec.shapes {
        for color in &spec.colors {
            for size in &spec.sizes {
                for location in &spec.locations {
                    combos.push(ShapeScene { shape: shape.clone(), color: color.clone(), size: size.clone(), location: location.clone() });
                }
            }
        }
    }
    let mut out = Vec::with_capacity(spec.n);
    while out.len() < spec.n {
        let mut round = combos.clone();
        round.shuffle(rng);
        out.extend(round.into_iter().take(spec.n - out.len()));
    }
    out
}

fn question_for<R: Rng>(scene: &ShapeScene, index: usize, spec: &SyntheticSpec, rng: &mut R) -> (String, String, AnswerType) {
    match index % 3 {
        0 => {
            let asked = if rng.random_bool(0.5) || spec.shapes.len() < 2 {
                scene.shape.clone()
            } else {
                let others: Vec<&String> = spec.shapes.iter().filter(|s| **s != scene.shape).collect();
                others[rng.random_range(0..others.len())].clone()
            };
            let answer = if asked == scene.shape { "yes" } else { "no" };
            (format!("is there a {asked}?"), answer.into(), AnswerType::Closed)
        }
        1 => ("what color is the shape?".into(), scene.color.clone(), AnswerType::Open),
        _ => (format!("what shape is in the {}?", scene.location), scene.shape.clone(), AnswerType::Open),
    }
}

/// Renders `spec.n` images and writes `attrs.csv`, `pairs.jsonl` (template
/// captions covering every attribute) and `vqa.jsonl` (one question per
/// image) under `out_dir`. Scenes are distinct while the attribute grid
/// allows it.
pub fn synth_generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthOutput> {
    if spec.n == 0 || spec.shapes.is_empty() || spec.colors.is_empty() || spec.sizes.is_empty() || spec.locations.is_empty() {
        return Err(MissError::InvalidArgument("synthetic spec needs n >= 1 and non-empty vocabularies".into()));
    }
    if spec.image_size < 8 {
        return Err(MissError::InvalidArgument("synthetic image size must be at least 8".into()));
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| MissError::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenes = choose_scenes(spec, &mut rng);

    let attrs_path = out_dir.join("attrs.csv");
    let mut w = csv::Writer::from_path(&attrs_path)?;
    w.write_record(["image", "shape", "color", "size", "location"])?;
    let mut rows: Vec<DatasetRow> = Vec::with_capacity(scenes.len());
    let mut vqa_lines = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let rel = format!("images/img_{i:04}.png");
        let path = out_dir.join(&rel);
        render_scene(scene, spec.image_size).save(&path)?;
        w.write_record([rel.as_str(), &scene.shape, &scene.color, &scene.size, &scene.location])?;
        rows.push(IndexMap::from([
            ("image".to_string(), rel.clone()),
            ("shape".to_string(), scene.shape.clone()),
            ("color".to_string(), scene.color.clone()),
            ("size".to_string(), scene.size.clone()),
            ("location".to_string(), scene.location.clone()),
        ]));
        let (question, answer, answer_type) = question_for(scene, i, spec, &mut rng);
        vqa_lines.push(VqaLine { id: Some(format!("q{i:04}")), image: rel, question, answer, answer_type });
    }
    w.flush().map_err(|e| MissError::io(&attrs_path, e))?;

    let pairs_path = out_dir.join("pairs.jsonl");
    transcap::emit_pairs(
        &rows,
        &DatasetAdapter::synthetic_shapes(),
        &CaptionBackend::Template,
        &pairs_path,
        EmitOptions { seed: spec.seed, policy: SubsetPolicy::AllAttributes },
    )?;

    let vqa_path = out_dir.join("vqa.jsonl");
    write_vqa(&vqa_path, &vqa_lines)?;
    Ok(SynthOutput { pairs: pairs_path, vqa: vqa_path, attrs: attrs_path, scenes })
}

pub fn write_vqa(path: &Path, lines: &[VqaLine]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| MissError::io(path, e))?;
    for l in lines {
        writeln!(f, "{}", serde_json::to_string(l)?).map_err(|e| MissError::io(path, e))?;
    }
    Ok(())
}
