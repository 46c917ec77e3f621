//! Proxy metrics over held-out synthetic clips, as a table and as JSON.

use lyricjam::corpus::{self, SyntheticConfig};
use lyricjam::desk::{self, DeskConfig};
use lyricjam::eval::{self, EvalThresholds};
use lyricjam::service::GenerationOptions;

fn main() -> lyricjam::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 60, 0))?;
    let run = desk::train_all(&corpus, &DeskConfig::quick(0))?;
    let opts = GenerationOptions {
        n: 30,
        ..GenerationOptions::default()
    };
    let report = eval::evaluate(&run.models, &corpus, &run.train_idx, &run.heldout_idx, &opts, 0)?;
    print!("{}", report.to_table());
    println!("{}", report.to_json());
    for miss in report.failures(&EvalThresholds::default()) {
        println!("missed: {miss}");
    }
    Ok(())
}
