//! Caption synthesis from attribute rows: the template backend with random
//! attribute subsets, then a recorded LLM transcript behind the response
//! cache (the second pass is served entirely from disk).

use std::path::Path;

use miss::transcap::{
    caption_rows, read_rows, CachedLlmClient, CaptionBackend, DatasetAdapter, EmitOptions, FixtureLlmClient, SubsetPolicy,
};

fn main() -> miss::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let rows = read_rows(&fixtures.join("rsna_rows.csv"))?;
    let adapter = DatasetAdapter::rsna();

    println!("template backend, random subsets:");
    for seed in 0..2 {
        let lines = caption_rows(&rows, &adapter, &CaptionBackend::Template, EmitOptions { seed, policy: SubsetPolicy::RandomSubset })?;
        for l in lines {
            println!("  seed {seed} {:<15} [{}] {}", l.image, l.subset.join(", "), l.caption);
        }
    }

    let cache = std::env::temp_dir().join("miss-transcap-example-cache");
    let _ = std::fs::remove_dir_all(&cache);
    let opts = EmitOptions { seed: 0, policy: SubsetPolicy::AllAttributes };
    for pass in ["cold", "warm"] {
        let client = CachedLlmClient::new(FixtureLlmClient::load(&fixtures.join("llm_transcript.json"))?, &cache)?;
        let lines = caption_rows(&rows, &adapter, &CaptionBackend::Llm { client: &client, phrasings: 3 }, opts)?;
        println!("fixture LLM, {pass} cache: {} requests reached the client", client.inner().calls());
        for l in lines {
            println!("  {:<15} {}", l.image, l.caption);
        }
    }
    Ok(())
}
