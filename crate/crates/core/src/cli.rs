//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::datasets::{self, SyntheticSpec};
use crate::decoder::Strategy;
use crate::error::{MissError, Result};
use crate::trainer::{self, EvalOptions, Stage, TrainConfig, Trainer};
use crate::transcap::{self, CachedLlmClient, CaptionBackend, DatasetAdapter, EmitOptions, FixtureLlmClient, HttpLlmClient, LlmClient, SubsetPolicy};

#[derive(Parser, Debug)]
#[command(name = "miss", version, about = "Generative medical VQA: TransCap, pre-training, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn attribute-labelled rows (CSV or JSON lines) into an image-caption manifest
    Transcap(TranscapArgs),
    /// Pre-train with image-text contrastive, matching and masked-token losses
    Pretrain(TrainArgs),
    /// Fine-tune the answer decoder on VQA triples
    Finetune(TrainArgs),
    /// Answer one question about one image
    Generate(GenerateArgs),
    /// Score a checkpoint on a VQA manifest and print a JSON report
    Eval(EvalArgs),
    /// Render the synthetic shapes corpus with manifests and desk configs
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Template,
    Llm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    All,
    Random,
}

#[derive(Args, Debug)]
struct TranscapArgs {
    /// Dataset rows (.csv, otherwise JSON lines)
    #[arg(long)]
    data: PathBuf,
    /// Built-in adapter (rsna, synthetic) or an adapter JSON file
    #[arg(long, default_value = "rsna")]
    adapter: String,
    #[arg(long, value_enum, default_value = "template")]
    backend: Backend,
    /// Phrasings requested per attribute subset (llm backend)
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Attribute subsets that receive phrasings
    #[arg(long, value_enum, default_value = "random")]
    policy: Policy,
    /// Replay LLM responses from a recorded transcript instead of the network
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config; keys override the preset it names ("preset": "full" | "desk")
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to initialize from
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Training manifest (pairs for pretrain, VQA for finetune)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config override, e.g. --set lr=1e-4 --set model.jtm.depth=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    /// Beam width; greedy decoding when omitted
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// VQA manifest
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Decode closed questions freely instead of choosing between yes and no
    #[arg(long)]
    free_closed: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("miss=info")).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn strategy(beam: Option<usize>) -> Strategy {
    beam.map_or(Strategy::Greedy, Strategy::Beam)
}

fn path_value(p: &Path) -> Result<String> {
    let abs = std::path::absolute(p).map_err(|e| MissError::io(p, e))?;
    Ok(serde_json::to_string(&abs.to_string_lossy())?)
}

fn train_config(stage: Stage, args: &TrainArgs) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| MissError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out".into(), path_value(out)?));
    }
    if let Some(ck) = &args.ckpt {
        overrides.push(("init_ckpt".into(), path_value(ck)?));
    }
    if let Some(data) = &args.data {
        let key = if stage == Stage::Pretrain { "pairs" } else { "vqa" };
        overrides.push((key.into(), path_value(data)?));
    }
    match &args.config {
        Some(path) => TrainConfig::load(path, stage, &overrides),
        None => TrainConfig::resolve(stage, None, &overrides, &std::env::current_dir().map_err(|e| MissError::io(".", e))?),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let spec = SyntheticSpec { n: a.n, seed: a.seed, image_size: a.image_size, ..Default::default() };
            log::info!("synthetic spec: {}, seed {}", serde_json::to_string(&spec)?, a.seed);
            let out = datasets::synth_generate(&spec, &a.out)?;
            let pretrain = json!({"preset": "desk", "seed": a.seed, "pairs": "pairs.jsonl", "vqa": "vqa.jsonl", "out": "ckpt/pretrain"});
            let finetune = json!({"preset": "desk", "seed": a.seed, "vqa": "vqa.jsonl", "init_ckpt": "ckpt/pretrain", "out": "ckpt/finetune"});
            for (name, v) in [("pretrain.json", pretrain), ("finetune.json", finetune)] {
                let p = a.out.join(name);
                std::fs::write(&p, serde_json::to_string_pretty(&v)?).map_err(|e| MissError::io(&p, e))?;
            }
            println!("{}", json!({"images": out.scenes.len(), "pairs": out.pairs, "vqa": out.vqa, "attrs": out.attrs}));
            Ok(())
        }
        Command::Transcap(a) => {
            let adapter = DatasetAdapter::resolve(&a.adapter)?;
            let rows = transcap::read_rows(&a.data)?;
            let policy = match a.policy {
                Policy::All => SubsetPolicy::AllAttributes,
                Policy::Random => SubsetPolicy::RandomSubset,
            };
            log::info!("transcap: adapter {}, backend {:?}, {} rows, seed {}", adapter.name, a.backend, rows.len(), a.seed);
            let opts = EmitOptions { seed: a.seed, policy };
            let count = match a.backend {
                Backend::Template => transcap::emit_pairs(&rows, &adapter, &CaptionBackend::Template, &a.out, opts)?,
                Backend::Llm => {
                    let client: Box<dyn LlmClient> = match &a.fixture {
                        Some(f) => Box::new(CachedLlmClient::with_env_dir(FixtureLlmClient::load(f)?)?),
                        None => Box::new(CachedLlmClient::with_env_dir(HttpLlmClient::from_env()?)?),
                    };
                    transcap::emit_pairs(&rows, &adapter, &CaptionBackend::Llm { client: client.as_ref(), phrasings: a.n }, &a.out, opts)?
                }
            };
            println!("{}", json!({"written": count, "out": a.out}));
            Ok(())
        }
        Command::Pretrain(a) => train(Stage::Pretrain, &a),
        Command::Finetune(a) => train(Stage::Finetune, &a),
        Command::Generate(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            log::info!("generate with {} (seed {}), strategy {:?}", a.ckpt.display(), ck.config.seed, strategy(a.beam));
            let answer = trainer::answer_question(&ck, &a.image, &a.question, strategy(a.beam))?;
            println!("{answer}");
            Ok(())
        }
        Command::Eval(a) => {
            let opts = EvalOptions { strategy: strategy(a.beam), constrain_closed: !a.free_closed, ..Default::default() };
            log::info!("eval {} on {} with {:?}", a.ckpt.display(), a.data.display(), opts);
            let report = trainer::evaluate_checkpoint(&a.ckpt, &a.data, &opts)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &a.out {
                std::fs::write(out, &text).map_err(|e| MissError::io(out, e))?;
            }
            println!("{text}");
            Ok(())
        }
    }
}

fn train(stage: Stage, args: &TrainArgs) -> Result<()> {
    let config = train_config(stage, args)?;
    let mut t = Trainer::new(config)?;
    let ck = t.run()?;
    let first = t.history.first().map(|l| l.loss);
    let last = t.history.last().map(|l| l.loss);
    let mut summary = json!({
        "stage": stage.name(),
        "steps": ck.step,
        "first_loss": first,
        "final_loss": last,
        "out": t.config.out,
    });
    if stage == Stage::Pretrain {
        summary["diagnostics"] = serde_json::to_value(t.pretrain_diagnostics()?)?;
    }
    println!("{summary}");
    Ok(())
}
