//! Trains both text CVAE variants on the synthetic corpus and decodes from each.

use lyricjam::corpus::{self, SyntheticConfig};
use lyricjam::latent;
use lyricjam::spec_vae::{self, SpecVaeConfig};
use lyricjam::text_cvae::{self, DecodeStrategy, PriorMode, TextCvaeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lyricjam::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 40, 0))?;
    let specs: Vec<_> = corpus.examples.iter().map(|e| e.spectrogram.as_ref()).collect();
    let spec = spec_vae::train(&specs, SpecVaeConfig { epochs: 8, ..SpecVaeConfig::desk(8) })?.model;

    for prior in [PriorMode::Standard, PriorMode::SpecPosterior] {
        let cfg = TextCvaeConfig {
            epochs: 120,
            ..TextCvaeConfig::desk(corpus.vocab.len(), 8, prior)
        };
        let run = text_cvae::train(&corpus.examples, &spec, cfg)?;
        let last = run.steps.rows().last().expect("trained");
        println!("{prior:?}: reconstruction {:.2}, kl {:.2}", last[0], last[1]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..2 {
            let ex = corpus.examples_of_cluster(k).next().expect("cluster has pairs");
            let q_s = spec.encode(&ex.spectrogram)?;
            let z_s = latent::sample(&q_s, 1.0, &mut rng);
            let z_t = match prior {
                PriorMode::Standard => latent::standard_normal_vec(8, &mut rng),
                PriorMode::SpecPosterior => latent::sample(&q_s, 1.0, &mut rng),
            };
            let line = run.model.decode(&z_t, &z_s, DecodeStrategy::Greedy)?;
            println!("  cluster {k} audio -> {}", text_cvae::line_text(&corpus.vocab, line.tokens()));
        }
    }
    Ok(())
}
