//! Ranked lines for one clip in every generation mode, plus a side-by-side table.
//!
//! cargo run --release --example generate -- [model_dir]
//!
//! Without a model directory, small models are trained first.

use std::path::Path;

use lyricjam::corpus::{self, SyntheticConfig};
use lyricjam::desk::{self, DeskConfig};
use lyricjam::eval;
use lyricjam::ranker::RankerSpec;
use lyricjam::service::{self, GenerationOptions, Mode, Models};

fn main() -> lyricjam::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 40, 11))?;
    let models = match std::env::args().nth(1) {
        Some(dir) => Models::load(Path::new(&dir), &RankerSpec::likelihood())?,
        None => desk::train_all(&corpus, &DeskConfig::quick(0))?.models,
    };
    let opts = GenerationOptions::default();
    let spec = lyricjam::audio::to_mel_spectrogram(&corpus.clips[0], models.spectrogram_params())?;
    println!("clip from cluster {} (pool: {})", corpus.clusters[0], corpus.pools[corpus.clusters[0]].join(" "));
    for mode in models.available_modes() {
        let result = service::generate_for_clip(&models, &spec, mode, &opts, 42, "demo-00000")?;
        println!("{mode} ({:.1} ms)", result.latency_ms);
        for line in &result.lines {
            println!("  #{} {:8.3}  {}", line.rank, line.score, line.text);
        }
    }

    let clips: Vec<(String, _)> = (0..5)
        .map(|i| {
            let s = lyricjam::audio::to_mel_spectrogram(&corpus.clips[i], models.spectrogram_params());
            s.map(|s| (corpus.examples[i].clip_id.clone(), s))
        })
        .collect::<lyricjam::Result<_>>()?;
    let table = eval::compare_modes(&models, &clips, &opts, 7)?;
    print!("{}", table.to_tsv());
    assert_eq!(table.cell_count(), clips.len() * Mode::ALL.len());
    Ok(())
}
