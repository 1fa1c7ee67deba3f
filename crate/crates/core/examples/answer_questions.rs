//! Answers questions with a fine-tuned checkpoint and scores a VQA manifest,
//! comparing greedy and beam decoding.
//!
//! `cargo run --release --example answer_questions -- CKPT_DIR VQA_MANIFEST`
//! (the desk_pipeline example leaves both under its output directory).

use std::path::PathBuf;

use miss::checkpoint::Checkpoint;
use miss::datasets::read_vqa;
use miss::decoder::Strategy;
use miss::trainer::{answer_question, evaluate, EvalOptions};

fn main() -> miss::Result<()> {
    let mut args = std::env::args().skip(1);
    let base = std::env::temp_dir().join("miss-desk-pipeline");
    let ckpt = args.next().map(PathBuf::from).unwrap_or_else(|| base.join("ckpt/finetune"));
    let manifest = args.next().map(PathBuf::from).unwrap_or_else(|| base.join("vqa.jsonl"));
    if !ckpt.join("manifest.json").is_file() {
        eprintln!("no checkpoint at {}; run `cargo run --release --example desk_pipeline` first", ckpt.display());
        std::process::exit(1);
    }
    let ck = Checkpoint::load(&ckpt)?;
    let records = read_vqa(&manifest)?;

    for r in records.iter().take(4) {
        let greedy = answer_question(&ck, &r.image, &r.question, Strategy::Greedy)?;
        let beam = answer_question(&ck, &r.image, &r.question, Strategy::Beam(3))?;
        println!("{:<34} ref {:<8} greedy {:<10} beam {}", r.question, r.answer, greedy, beam);
    }

    for (label, opts) in [
        ("greedy, closed constrained", EvalOptions::default()),
        ("greedy, closed free", EvalOptions { constrain_closed: false, ..Default::default() }),
        ("beam 3", EvalOptions { strategy: Strategy::Beam(3), ..Default::default() }),
    ] {
        let rep = evaluate(&ck.model, ck.config.decoder_context, &ck.config.normalization, &records, &opts)?;
        println!("{label:<28} closed {:?}  open {:?}  overall {:?}", rep.closed_acc, rep.open_acc, rep.overall_acc);
    }
    Ok(())
}
