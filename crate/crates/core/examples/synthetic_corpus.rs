//! Generates the clustered synthetic corpus and writes it as WAV files plus a manifest.
//!
//! cargo run --release --example synthetic_corpus -- [out_dir]

use lyricjam::corpus::{self, SyntheticConfig};

fn main() -> lyricjam::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(3, 10, 1))?;
    for (k, (pool, band)) in corpus.pools.iter().zip(&corpus.bands).enumerate() {
        println!("cluster {k}: {:.0}-{:.0} Hz, words {}", band.0, band.1, pool.join(" "));
        for ex in corpus.examples_of_cluster(k).take(2) {
            println!("  {}  {}", ex.clip_id, ex.line.source_text());
        }
    }
    println!("{} pairs, vocabulary of {}", corpus.examples.len(), corpus.vocab.len());
    if let Some(dir) = std::env::args().nth(1) {
        let manifest = corpus::write_synthetic_corpus(&corpus, dir.as_ref())?;
        println!("wrote {}", manifest.display());
    }
    Ok(())
}
