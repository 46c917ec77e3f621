//! Trains every model on the desk corpus and reports the proxy metrics.
//!
//! cargo run --release --example desk_pipeline -- [--seed S] [--save DIR] [--text-only]
//!
//! `--text-only` trains decoders that see the text latent alone.

use std::path::PathBuf;
use std::time::Instant;

use lyricjam::desk::{self, DeskConfig};
use lyricjam::eval::{self, EvalThresholds};
use lyricjam::service::{self, GenerationOptions, Mode};

fn main() -> anyhow::Result<()> {
    let mut cfg = DeskConfig::default();
    let mut save: Option<PathBuf> = None;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--seed" => cfg.seed = args.next().unwrap_or_default().parse()?,
            "--save" => save = args.next().map(PathBuf::from),
            "--text-only" => cfg.decoder_sees_spec = false,
            other => anyhow::bail!("unknown argument {other}"),
        }
    }
    let corpus = desk::desk_corpus(cfg.seed)?;
    let run = desk::train_all(&corpus, &cfg)?;
    if let Some(dir) = &save {
        desk::save_models(&run.models, dir)?;
    }
    println!("training seconds: {:?}", run.times);
    println!("gan epoch mse: {:?}", run.gan_epoch_mse);

    let opts = GenerationOptions::default();
    let report = eval::evaluate(&run.models, &corpus, &run.train_idx, &run.heldout_idx, &opts, cfg.seed)?;
    print!("{}", report.to_table());

    let mut latencies = Vec::new();
    for &i in run.heldout_idx.iter().take(5) {
        let t = Instant::now();
        let spec = lyricjam::audio::to_mel_spectrogram(&corpus.clips[i], run.models.spectrogram_params())?;
        let lines = service::generate_lines(&run.models, &spec, Mode::Topology, &opts, i as u64)?;
        latencies.push(t.elapsed().as_secs_f64() * 1e3);
        println!("cluster {} -> {:?}", corpus.clusters[i], lines.iter().map(|l| &l.text).collect::<Vec<_>>());
    }
    println!("latency ms: {latencies:?}");
    for failure in report.failures(&EvalThresholds::default()) {
        println!("missed: {failure}");
    }
    Ok(())
}
