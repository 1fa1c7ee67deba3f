//! Transfer-and-caption: turning attribute-labelled images into image-text
//! pairs.
//!
//! A [`DatasetAdapter`] maps the label columns of a unimodal dataset row to an
//! [`AttrDict`]. Phrasings for attribute subsets come either from built-in
//! sentence templates or from a chat-completion LLM behind [`LlmClient`];
//! every phrasing must mention each attribute value it covers. Captions are
//! then sampled per image and written to a JSON-lines manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MissError, Result};

/// Attribute names every adapter may use; adapters may add their own.
pub const SCHEMA: [&str; 7] = ["modality", "plane", "shape", "size", "organ", "location", "pathology"];

pub const TEMPLATE_PROVENANCE: &str = "template";

/// Bumped whenever the prompt text changes, since cached responses are keyed
/// by prompt.
pub const PROMPT_VERSION: &str = "transcap-prompt-v1";

/// Per-image attribute dictionary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrDict {
    pub image_id: String,
    pub attributes: IndexMap<String, String>,
}

impl AttrDict {
    pub fn new(image_id: impl Into<String>, attributes: IndexMap<String, String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(MissError::InvalidArgument("attribute dictionary is empty".into()));
        }
        if let Some((k, _)) = attributes.iter().find(|(_, v)| v.trim().is_empty()) {
            return Err(MissError::InvalidArgument(format!("attribute '{k}' has an empty value")));
        }
        Ok(AttrDict { image_id: image_id.into(), attributes })
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.keys().cloned().collect()
    }

    /// The attributes named in `names`, in dictionary order.
    pub fn subset(&self, names: &[String]) -> AttrDict {
        let attributes = self.attributes.iter().filter(|(k, _)| names.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        AttrDict { image_id: self.image_id.clone(), attributes }
    }
}

/// Value-to-alternatives table accepted by the coverage validator.
pub type Synonyms = BTreeMap<String, Vec<String>>;

/// Values of `attrs` that `caption` fails to mention (case-insensitive
/// substring match against the value or any of its synonyms).
pub fn missing_values(caption: &str, attrs: &AttrDict, synonyms: &Synonyms) -> Vec<String> {
    let text = caption.to_lowercase();
    attrs
        .attributes
        .values()
        .filter(|v| {
            let direct = text.contains(&v.to_lowercase());
            let alt = synonyms.get(*v).is_some_and(|alts| alts.iter().any(|a| text.contains(&a.to_lowercase())));
            !(direct || alt)
        })
        .cloned()
        .collect()
}

pub fn covers(caption: &str, attrs: &AttrDict, synonyms: &Synonyms) -> bool {
    missing_values(caption, attrs, synonyms).is_empty()
}

/// One row of a unimodal dataset, column name to raw value.
pub type DatasetRow = IndexMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub column: String,
    pub attribute: String,
    /// Closed label set: raw value to attribute value. Unlisted values are
    /// an error. `None` passes values through.
    #[serde(default)]
    pub values: Option<BTreeMap<String, String>>,
}

/// Column mapping from a dataset's rows to attribute dictionaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetAdapter {
    pub name: String,
    pub image_column: String,
    /// Attributes shared by every row of the dataset.
    #[serde(default)]
    pub constants: IndexMap<String, String>,
    pub columns: Vec<ColumnMap>,
    #[serde(default)]
    pub synonyms: Synonyms,
}

impl DatasetAdapter {
    /// RSNA pneumonia-detection style chest radiographs: class, number of
    /// opacities and their location.
    pub fn rsna() -> Self {
        let classes = [
            ("Normal", "Normal"),
            ("No Lung Opacity / Not Normal", "No Lung Opacity/Not Normal"),
            ("No Lung Opacity/Not Normal", "No Lung Opacity/Not Normal"),
            ("Lung Opacity", "Lung Opacity"),
        ];
        let mut synonyms = Synonyms::new();
        synonyms.insert("chest X-ray".into(), vec!["chest radiograph".into(), "CXR".into(), "chest x ray".into()]);
        DatasetAdapter {
            name: "rsna".into(),
            image_column: "image".into(),
            constants: IndexMap::from([("modality".to_string(), "chest X-ray".to_string())]),
            columns: vec![
                ColumnMap {
                    column: "class".into(),
                    attribute: "class".into(),
                    values: Some(classes.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()),
                },
                ColumnMap { column: "nums".into(), attribute: "nums".into(), values: None },
                ColumnMap { column: "location".into(), attribute: "location".into(), values: None },
            ],
            synonyms,
        }
    }

    /// Rows written by the synthetic shapes generator.
    pub fn synthetic_shapes() -> Self {
        let pass = |c: &str| ColumnMap { column: c.into(), attribute: c.into(), values: None };
        DatasetAdapter {
            name: "synthetic-shapes".into(),
            image_column: "image".into(),
            constants: IndexMap::new(),
            columns: vec![pass("shape"), pass("color"), pass("size"), pass("location")],
            synonyms: Synonyms::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MissError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Built-in adapter by name, or a JSON adapter file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "rsna" => Ok(Self::rsna()),
            "synthetic" | "synthetic-shapes" => Ok(Self::synthetic_shapes()),
            path => Self::load(Path::new(path)),
        }
    }
}

/// Maps one dataset row to its attribute dictionary. Empty or absent label
/// fields are omitted.
pub fn build_attr_dict(row: &DatasetRow, row_index: usize, adapter: &DatasetAdapter) -> Result<AttrDict> {
    let image = row
        .get(&adapter.image_column)
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| MissError::MissingField { row: row_index, field: adapter.image_column.clone() })?;
    let mut attributes = adapter.constants.clone();
    for col in &adapter.columns {
        let Some(raw) = row.get(&col.column).map(|v| v.trim()).filter(|v| !v.is_empty()) else { continue };
        let value = match &col.values {
            Some(map) => map.get(raw).cloned().ok_or_else(|| MissError::UnmappedLabel {
                row: row_index,
                field: col.column.clone(),
                value: raw.to_string(),
            })?,
            None => raw.to_string(),
        };
        attributes.insert(col.attribute.clone(), value);
    }
    AttrDict::new(image.clone(), attributes).map_err(|e| MissError::Row { row: row_index, source: Box::new(e) })
}

/// Reads dataset rows from CSV (by extension) or JSON lines.
pub fn read_rows(path: &Path) -> Result<Vec<DatasetRow>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
        }
        return Ok(rows);
    }
    let text = fs::read_to_string(path).map_err(|e| MissError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: IndexMap<String, serde_json::Value> = serde_json::from_str(line)
            .map_err(|e| MissError::Manifest { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        let row = obj
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => String::new(),
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

/// Phrasings per attribute subset. Subsets are keyed by attribute names in
/// dictionary order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionSet {
    pub phrasings: BTreeMap<Vec<String>, Vec<String>>,
    /// LLM model id, or [`TEMPLATE_PROVENANCE`].
    pub provenance: String,
}

impl CaptionSet {
    pub fn new(provenance: impl Into<String>) -> Self {
        CaptionSet { phrasings: BTreeMap::new(), provenance: provenance.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.phrasings.values().all(Vec::is_empty)
    }

    pub fn insert(&mut self, subset: Vec<String>, phrasings: Vec<String>) {
        self.phrasings.entry(subset).or_default().extend(phrasings);
    }
}

const TEMPLATES_ONE: [&str; 5] = [
    "An image showing {0}.",
    "This image shows {0}.",
    "The picture features {0}.",
    "Here we can see {0}.",
    "An image where the {k0} is {0}.",
];

const TEMPLATES_TWO: [&str; 5] = [
    "An image showing {0} and {1}.",
    "This image shows {0} with {1}.",
    "{0} and {1} are visible in this image.",
    "The picture features {0}, together with {1}.",
    "An image where the {k0} is {0} and the {k1} is {1}.",
];

const TEMPLATES_MANY: [&str; 5] = [
    "An image showing {list}.",
    "This image shows {list}.",
    "The picture features {list}.",
    "Visible in this image: {list}.",
    "An image where {pairs}.",
];

fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn fill_template(template: &str, attrs: &AttrDict) -> String {
    let names: Vec<String> = attrs.attributes.keys().cloned().collect();
    let values: Vec<String> = attrs.attributes.values().cloned().collect();
    let pairs: Vec<String> = names.iter().zip(&values).map(|(k, v)| format!("the {k} is {v}")).collect();
    let mut out = template.replace("{list}", &join_list(&values)).replace("{pairs}", &join_list(&pairs));
    for (i, (k, v)) in names.iter().zip(&values).enumerate().take(2) {
        out = out.replace(&format!("{{k{i}}}"), k).replace(&format!("{{{i}}}"), v);
    }
    out
}

fn templates_for(count: usize) -> &'static [&'static str; 5] {
    match count {
        1 => &TEMPLATES_ONE,
        2 => &TEMPLATES_TWO,
        _ => &TEMPLATES_MANY,
    }
}

/// Every built-in template filled with `attrs`.
pub fn template_phrasings(attrs: &AttrDict) -> Vec<String> {
    templates_for(attrs.attributes.len()).iter().map(|t| fill_template(t, attrs)).collect()
}

/// One template caption chosen uniformly at random.
pub fn template_caption<R: Rng + ?Sized>(attrs: &AttrDict, rng: &mut R) -> String {
    let templates = templates_for(attrs.attributes.len());
    fill_template(templates[rng.random_range(0..templates.len())], attrs)
}

/// Picks an attribute subset that has phrasings uniformly, then one of its
/// phrasings uniformly. Returns the caption and the subset it covers.
pub fn sample_caption_with_subset<R: Rng + ?Sized>(attrs: &AttrDict, caps: &CaptionSet, rng: &mut R) -> Result<(String, Vec<String>)> {
    let usable: Vec<(&Vec<String>, &Vec<String>)> = caps
        .phrasings
        .iter()
        .filter(|(subset, ph)| !ph.is_empty() && subset.iter().all(|n| attrs.attributes.contains_key(n)))
        .collect();
    if usable.is_empty() {
        return Err(MissError::InvalidArgument("empty CaptionSet".into()));
    }
    let (subset, phrasings) = usable[rng.random_range(0..usable.len())];
    Ok((phrasings[rng.random_range(0..phrasings.len())].clone(), subset.clone()))
}

pub fn sample_caption<R: Rng + ?Sized>(attrs: &AttrDict, caps: &CaptionSet, rng: &mut R) -> Result<String> {
    sample_caption_with_subset(attrs, caps, rng).map(|(c, _)| c)
}

/// Which attribute subsets receive phrasings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetPolicy {
    /// Only the full dictionary.
    AllAttributes,
    /// Every non-empty subset (sampled uniformly).
    RandomSubset,
}

/// Attribute-name subsets in dictionary order. `RandomSubset` enumerates all
/// `2^k - 1` non-empty subsets.
pub fn caption_subsets(attrs: &AttrDict, policy: SubsetPolicy) -> Result<Vec<Vec<String>>> {
    let names = attrs.names();
    match policy {
        SubsetPolicy::AllAttributes => Ok(vec![names]),
        SubsetPolicy::RandomSubset => {
            if names.len() > 12 {
                return Err(MissError::InvalidArgument(format!("{} attributes is too many to enumerate subsets", names.len())));
            }
            Ok((1u32..(1 << names.len()))
                .map(|mask| names.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, n)| n.clone()).collect())
                .collect())
        }
    }
}

/// Chat-completion backend.
pub trait LlmClient {
    fn model_id(&self) -> &str;
    fn send(&self, prompt: &str) -> Result<String>;
}

/// OpenAI-compatible chat-completions endpoint.
pub struct HttpLlmClient {
    url: String,
    key: Option<String>,
    model: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpLlmClient { url: url.into(), key, model: model.into(), retries, agent }
    }

    /// Reads `TRANSCAP_LLM_URL`, `TRANSCAP_LLM_KEY` and optionally
    /// `TRANSCAP_LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("TRANSCAP_LLM_URL").map_err(|_| MissError::Config("TRANSCAP_LLM_URL is not set".into()))?;
        let key = std::env::var("TRANSCAP_LLM_KEY").ok();
        let model = std::env::var("TRANSCAP_LLM_MODEL").unwrap_or_else(|_| "gpt-3.5-turbo".into());
        Ok(Self::new(url, key, model, Duration::from_secs(60), 3))
    }

    fn send_once(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"].as_str().map(str::to_string).ok_or_else(|| format!("unexpected response: {v}"))
    }
}

impl LlmClient for HttpLlmClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn send(&self, prompt: &str) -> Result<String> {
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.send_once(prompt) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("LLM request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(MissError::Network { attempts, cached: 0, message: last })
    }
}

/// Replays a recorded prompt → response transcript; unknown prompts fail as
/// if the endpoint were unreachable.
pub struct FixtureLlmClient {
    model: String,
    transcript: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl FixtureLlmClient {
    pub fn new(model: impl Into<String>, transcript: BTreeMap<String, String>) -> Self {
        FixtureLlmClient { model: model.into(), transcript, calls: AtomicUsize::new(0) }
    }

    /// Loads `{"model": .., "transcript": [{"prompt": .., "response": ..}]}`.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            prompt: String,
            response: String,
        }
        #[derive(Deserialize)]
        struct Fixture {
            model: String,
            transcript: Vec<Entry>,
        }
        let text = fs::read_to_string(path).map_err(|e| MissError::io(path, e))?;
        let f: Fixture = serde_json::from_str(&text)?;
        Ok(Self::new(f.model, f.transcript.into_iter().map(|e| (e.prompt, e.response)).collect()))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for FixtureLlmClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn send(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.transcript.get(prompt).cloned().ok_or_else(|| MissError::Network {
            attempts: 1,
            cached: 0,
            message: "prompt not in fixture transcript".into(),
        })
    }
}

/// On-disk response cache keyed by SHA-256 of model id and prompt. A hit
/// never reaches the wrapped client.
pub struct CachedLlmClient<C> {
    inner: C,
    dir: PathBuf,
    misses: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    prompt: String,
    response: String,
}

impl<C: LlmClient> CachedLlmClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| MissError::io(&dir, e))?;
        Ok(CachedLlmClient { inner, dir, misses: AtomicUsize::new(0) })
    }

    /// Cache directory from `TRANSCAP_CACHE_DIR`, defaulting to `.transcap-cache`.
    pub fn with_env_dir(inner: C) -> Result<Self> {
        let dir = std::env::var("TRANSCAP_CACHE_DIR").unwrap_or_else(|_| ".transcap-cache".into());
        Self::new(inner, dir)
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    /// Requests forwarded to the wrapped client.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.inner.model_id().as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", self.cache_key(prompt)))
    }

    pub fn entries(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| it.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0)
    }

    /// Stores a response as if it had been received.
    pub fn seed(&self, prompt: &str, response: &str) -> Result<()> {
        let entry = CacheEntry { model: self.inner.model_id().to_string(), prompt: prompt.to_string(), response: response.to_string() };
        let path = self.path_for(prompt);
        fs::write(&path, serde_json::to_string_pretty(&entry)?).map_err(|e| MissError::io(&path, e))
    }
}

impl<C: LlmClient> LlmClient for CachedLlmClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn send(&self, prompt: &str) -> Result<String> {
        let path = self.path_for(prompt);
        if let Ok(text) = fs::read_to_string(&path) {
            let entry: CacheEntry = serde_json::from_str(&text)?;
            return Ok(entry.response);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        match self.inner.send(prompt) {
            Ok(resp) => {
                self.seed(prompt, &resp)?;
                Ok(resp)
            }
            Err(MissError::Network { attempts, message, .. }) => Err(MissError::Network { attempts, cached: self.entries(), message }),
            Err(e) => Err(e),
        }
    }
}

/// The prompt sent for `attrs`. `attempt > 0` marks a retry so that a
/// retried prompt is not answered from the cache.
pub fn build_prompt(attrs: &AttrDict, n: usize, attempt: usize) -> String {
    let mut p = String::from("You write captions for a medical image-text dataset.\nImage attributes:\n");
    for (k, v) in &attrs.attributes {
        p.push_str(&format!("- {k}: {v}\n"));
    }
    p.push_str(&format!(
        "Write {n} different single-sentence descriptions of this image. Every sentence must mention each attribute value above word for word. Output one sentence per line, without numbering."
    ));
    if attempt > 0 {
        p.push_str(&format!("\n(retry {attempt})"));
    }
    p
}

/// Splits an LLM reply into candidate sentences.
pub fn parse_phrasings(response: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in response.lines() {
        let mut s = line.trim();
        s = s.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 && s[digits..].starts_with(['.', ')']) {
            s = s[digits + 1..].trim_start();
        }
        let s = s.trim().trim_matches('"').trim();
        if !s.is_empty() && !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Retry budget for [`request_phrasings`].
pub const MAX_PROMPT_ATTEMPTS: usize = 3;

/// Asks the LLM for `n` phrasings of the full dictionary, keeping only those
/// that mention every value. Re-prompts while fewer than `n` survive, up to
/// [`MAX_PROMPT_ATTEMPTS`] prompts.
pub fn request_phrasings(attrs: &AttrDict, client: &dyn LlmClient, n: usize, synonyms: &Synonyms) -> Result<CaptionSet> {
    if n == 0 {
        return Err(MissError::InvalidArgument("n must be >= 1".into()));
    }
    let mut kept: Vec<String> = Vec::new();
    for attempt in 0..MAX_PROMPT_ATTEMPTS {
        let response = client.send(&build_prompt(attrs, n, attempt))?;
        for p in parse_phrasings(&response) {
            if kept.len() < n && !kept.contains(&p) {
                if covers(&p, attrs, synonyms) {
                    kept.push(p);
                } else {
                    log::debug!("rejected phrasing for {}: {p}", attrs.image_id);
                }
            }
        }
        if kept.len() >= n {
            break;
        }
    }
    if kept.is_empty() {
        return Err(MissError::CoverageValidation);
    }
    let mut set = CaptionSet::new(client.model_id());
    set.insert(attrs.names(), kept);
    Ok(set)
}

pub enum CaptionBackend<'a> {
    Template,
    Llm { client: &'a dyn LlmClient, phrasings: usize },
}

impl CaptionBackend<'_> {
    fn caption_set(&self, attrs: &AttrDict, policy: SubsetPolicy, synonyms: &Synonyms) -> Result<CaptionSet> {
        let subsets = caption_subsets(attrs, policy)?;
        match self {
            CaptionBackend::Template => {
                let mut set = CaptionSet::new(TEMPLATE_PROVENANCE);
                for s in subsets {
                    let sub = attrs.subset(&s);
                    set.insert(s, template_phrasings(&sub));
                }
                Ok(set)
            }
            CaptionBackend::Llm { client, phrasings } => {
                let mut set = CaptionSet::new(client.model_id());
                for s in subsets {
                    let got = request_phrasings(&attrs.subset(&s), *client, *phrasings, synonyms)?;
                    for (k, v) in got.phrasings {
                        set.insert(k, v);
                    }
                }
                Ok(set)
            }
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLine {
    pub image: String,
    pub caption: String,
    pub attributes: IndexMap<String, String>,
    /// Attribute names the caption was drawn for.
    pub subset: Vec<String>,
    pub provenance: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmitOptions {
    pub seed: u64,
    pub policy: SubsetPolicy,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions { seed: 0, policy: SubsetPolicy::RandomSubset }
    }
}

/// Converts rows into captioned pairs, one manifest line per row in input
/// order. Each row draws from its own seeded stream, so output does not
/// depend on processing order.
pub fn emit_pairs(rows: &[DatasetRow], adapter: &DatasetAdapter, backend: &CaptionBackend<'_>, out: &Path, opts: EmitOptions) -> Result<usize> {
    let lines = caption_rows(rows, adapter, backend, opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MissError::io(parent, e))?;
    }
    let file = fs::File::create(out).map_err(|e| MissError::io(out, e))?;
    let mut w = BufWriter::new(file);
    for (i, line) in lines.iter().enumerate() {
        let json = serde_json::to_string(line)?;
        writeln!(w, "{json}").map_err(|e| MissError::Row { row: i, source: Box::new(MissError::io(out, e)) })?;
    }
    w.flush().map_err(|e| MissError::io(out, e))?;
    Ok(lines.len())
}

/// Captions every row without writing anything.
pub fn caption_rows(rows: &[DatasetRow], adapter: &DatasetAdapter, backend: &CaptionBackend<'_>, opts: EmitOptions) -> Result<Vec<PairLine>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let wrap = |e: MissError| match e {
                e @ (MissError::Row { .. } | MissError::UnmappedLabel { .. } | MissError::MissingField { .. }) => e,
                e => MissError::Row { row: i, source: Box::new(e) },
            };
            let attrs = build_attr_dict(row, i, adapter).map_err(wrap)?;
            let caps = backend.caption_set(&attrs, opts.policy, &adapter.synonyms).map_err(wrap)?;
            let mut rng = row_rng(opts.seed, i);
            let (caption, subset) = sample_caption_with_subset(&attrs, &caps, &mut rng).map_err(wrap)?;
            Ok(PairLine { image: attrs.image_id.clone(), caption, attributes: attrs.attributes, subset, provenance: caps.provenance })
        })
        .collect()
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}
