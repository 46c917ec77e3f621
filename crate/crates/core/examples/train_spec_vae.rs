//! Trains the spectrogram VAE and checks that its latent means separate the clusters.

use lyricjam::audio::MelSpectrogram;
use lyricjam::corpus::{self, SyntheticConfig};
use lyricjam::spec_vae::{self, SpecVaeConfig};

fn main() -> lyricjam::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 40, 0))?;
    let specs: Vec<&MelSpectrogram> = corpus.examples.iter().map(|e| e.spectrogram.as_ref()).collect();
    let cfg = SpecVaeConfig {
        epochs: 15,
        ..SpecVaeConfig::desk(8)
    };
    let run = spec_vae::train(&specs, cfg)?;
    for (i, row) in run.epochs.rows().iter().enumerate().step_by(3) {
        println!("epoch {i:2}: reconstruction {:8.2}  kl {:6.2}", row[0], row[1]);
    }

    let means: Vec<Vec<f64>> = run
        .model
        .encode_all(&specs)?
        .into_iter()
        .map(|g| g.mean().to_vec())
        .collect();
    let centroid = |k: usize| {
        let rows: Vec<&Vec<f64>> = means.iter().zip(&corpus.clusters).filter(|(_, &c)| c == k).map(|(m, _)| m).collect();
        (0..8).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64).collect::<Vec<_>>()
    };
    let (a, b) = (centroid(0), centroid(1));
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let correct = means
        .iter()
        .zip(&corpus.clusters)
        .filter(|(m, &c)| (dist(m, &a) < dist(m, &b)) == (c == 0))
        .count();
    println!("nearest-centroid accuracy {:.2}", correct as f64 / means.len() as f64);
    Ok(())
}
