//! Synthetic corpus → pre-training → fine-tuning → evaluation, all at desk
//! scale. Pass an output directory (default: a fresh temp dir).

use std::path::PathBuf;
use std::time::Instant;

use miss::datasets::{self, SyntheticSpec};
use miss::trainer::{self, EvalOptions, Stage, TrainConfig, Trainer};

fn main() -> miss::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("miss=warn")).init();
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("miss-desk-pipeline"));
    let data = datasets::synth_generate(&SyntheticSpec::default(), &dir)?;

    let start = Instant::now();
    let mut cfg = TrainConfig::desk(Stage::Pretrain);
    cfg.pairs = Some(data.pairs.clone());
    cfg.vqa = Some(data.vqa.clone());
    cfg.out = dir.join("ckpt/pretrain");
    let mut pre = Trainer::new(cfg)?;
    pre.run()?;
    let diag = pre.pretrain_diagnostics()?;
    println!(
        "pretrain: {} steps, loss {:.4} -> {:.4}, {:.1}s",
        pre.step,
        pre.history.first().map_or(f64::NAN, |l| l.loss),
        pre.history.last().map_or(f64::NAN, |l| l.loss),
        start.elapsed().as_secs_f64()
    );
    println!("  itc i2t {:.3}  t2i {:.3}  itm train {:.3}  itm grid {:.3}", diag.itc_i2t_acc, diag.itc_t2i_acc, diag.itm_train_acc, diag.itm_grid_acc);

    let start = Instant::now();
    let mut cfg = TrainConfig::desk(Stage::Finetune);
    cfg.vqa = Some(data.vqa.clone());
    cfg.init_ckpt = Some(dir.join("ckpt/pretrain"));
    cfg.out = dir.join("ckpt/finetune");
    let mut ft = Trainer::new(cfg)?;
    ft.run()?;
    println!(
        "finetune: {} steps, loss {:.4} -> {:.4}, {:.1}s",
        ft.step,
        ft.history.first().map_or(f64::NAN, |l| l.loss),
        ft.history.last().map_or(f64::NAN, |l| l.loss),
        start.elapsed().as_secs_f64()
    );

    let report = trainer::evaluate_checkpoint(&dir.join("ckpt/finetune"), &data.vqa, &EvalOptions::default())?;
    for p in &report.predictions {
        println!("  {:<34} ref {:<8} got {:<12} {}", p.question, p.answer, p.prediction, if p.correct { "ok" } else { "MISS" });
    }
    println!("overall accuracy {:?}", report.overall_acc);
    Ok(())
}
