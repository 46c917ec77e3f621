//! Trains the latent aligner and reports held-out alignment error and the centroid probe.

use lyricjam::desk::{self, DeskConfig};
use lyricjam::eval;

fn main() -> lyricjam::Result<()> {
    let corpus = lyricjam::corpus::make_synthetic_corpus(&lyricjam::corpus::SyntheticConfig::new(2, 60, 0))?;
    let run = desk::train_all(&corpus, &DeskConfig::quick(0))?;
    println!("per-epoch training mse {:?}", run.gan_epoch_mse);

    let text = run.models.text_standard.as_ref().expect("trained");
    let gan = run.models.gan.as_ref().expect("trained");
    let labeled = |idx: &[usize]| -> Vec<_> { idx.iter().map(|&i| (corpus.clusters[i], &corpus.examples[i])).collect() };
    let heldout: Vec<_> = run.heldout_idx.iter().map(|&i| &corpus.examples[i]).collect();
    let report = eval::alignment_report(&run.models.spec_vae, text, gan, &heldout)?;
    println!(
        "held-out latent mse {:.3} (untrained {:.3})",
        report.latent_mse, report.untrained_latent_mse
    );
    let probe = eval::centroid_transfer(
        &run.models.spec_vae,
        text,
        gan,
        &labeled(&run.train_idx),
        &labeled(&run.heldout_idx),
    )?;
    println!("fraction nearer own cluster's text centroid: {probe:?}");
    let z = gan.predict_text_latent(&vec![0.0; gan.config().latent_dim])?;
    println!("G(0) norm {:.3}", z.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
