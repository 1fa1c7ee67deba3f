//! Renders the synthetic shapes corpus and prints what was written.
//!
//! `cargo run --release --example synth_corpus -- [OUT_DIR] [N] [SEED]`

use std::path::PathBuf;

use miss::datasets::{read_pairs, read_vqa, synth_generate, SyntheticSpec};

fn main() -> miss::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("miss-synth"));
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = SyntheticSpec { n, seed, ..Default::default() };
    let written = synth_generate(&spec, &out)?;
    println!("{} images under {}", written.scenes.len(), out.display());

    let pairs = read_pairs(&written.pairs)?;
    let vqa = read_vqa(&written.vqa)?;
    for ((scene, pair), q) in written.scenes.iter().zip(&pairs).zip(&vqa) {
        println!("{:<9} {:<7} {:<6} {:<12} | {}", scene.shape, scene.color, scene.size, scene.location, pair.caption);
        println!("{:>40} {} -> {} ({:?})", "", q.question, q.answer, q.answer_type);
    }
    println!("manifests: {}, {}, {}", written.pairs.display(), written.vqa.display(), written.attrs.display());
    Ok(())
}
