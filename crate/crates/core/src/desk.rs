//! End-to-end training of small models on a synthetic corpus.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::corpus::{split_by_clip, PairedExample, SyntheticConfig, SyntheticCorpus};
use crate::error::Result;
use crate::gan::{self, GanConfig, GanTraining};
use crate::nn::LossHistory;
use crate::service::{layout, Models, Scorer};
use crate::spec_vae::{self, SpecVaeConfig};
use crate::text_cvae::{self, PriorMode, TextCvaeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub latent_dim: usize,
    pub spec_epochs: usize,
    pub text_epochs: usize,
    pub gan_epochs: usize,
    /// Fraction of clips held out from training.
    pub heldout_fraction: f64,
    /// Whether the text decoders see `z_s` next to `z_t`.
    pub decoder_sees_spec: bool,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            spec_epochs: 30,
            text_epochs: 500,
            gan_epochs: 6,
            heldout_fraction: 0.1,
            decoder_sees_spec: true,
            seed: 0,
        }
    }
}

impl DeskConfig {
    /// Few epochs, for demos and smoke tests; the models barely learn.
    pub fn quick(seed: u64) -> Self {
        Self {
            spec_epochs: 4,
            text_epochs: 30,
            gan_epochs: 3,
            seed,
            ..Self::default()
        }
    }

    pub fn spec_vae(&self) -> SpecVaeConfig {
        SpecVaeConfig {
            epochs: self.spec_epochs,
            seed: self.seed,
            ..SpecVaeConfig::desk(self.latent_dim)
        }
    }

    pub fn text_cvae(&self, vocab_size: usize, prior: PriorMode) -> TextCvaeConfig {
        TextCvaeConfig {
            epochs: self.text_epochs,
            seed: self.seed.wrapping_add(1),
            decoder_sees_spec: self.decoder_sees_spec,
            ..TextCvaeConfig::desk(vocab_size, self.latent_dim, prior)
        }
    }

    pub fn gan(&self) -> GanConfig {
        GanConfig {
            epochs: self.gan_epochs,
            seed: self.seed.wrapping_add(2),
            ..GanConfig::new(self.latent_dim)
        }
    }
}

/// Wall-clock seconds spent in each training stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub spec_vae: f64,
    pub text_standard: f64,
    pub text_spec: f64,
    pub gan: f64,
}

pub struct DeskRun {
    pub models: Models,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
    /// Columns: d_loss, g_adv_loss, mse, g_total.
    pub gan_steps: LossHistory,
    pub gan_epoch_mse: Vec<f64>,
    pub times: StageTimes,
}

/// Pairs per cluster of [`desk_corpus`].
pub const DESK_PAIRS: usize = 200;

/// The synthetic corpus used by the desk-scale runs: two clusters, [`DESK_PAIRS`] pairs each.
pub fn desk_corpus(seed: u64) -> Result<SyntheticCorpus> {
    crate::corpus::make_synthetic_corpus(&SyntheticConfig::new(2, DESK_PAIRS, seed))
}

/// Trains the spec-VAE, both text models and the GAN on the training split of `corpus`.
pub fn train_all(corpus: &SyntheticCorpus, cfg: &DeskConfig) -> Result<DeskRun> {
    let (train_idx, heldout_idx) = split_by_clip(&corpus.examples, cfg.heldout_fraction, cfg.seed);
    let train: Vec<PairedExample> = train_idx.iter().map(|&i| corpus.examples[i].clone()).collect();
    let specs: Vec<&MelSpectrogram> = train.iter().map(|e| e.spectrogram.as_ref()).collect();
    let mut times = StageTimes::default();

    let t = Instant::now();
    let spec_vae = spec_vae::train(&specs, cfg.spec_vae())?.model;
    times.spec_vae = t.elapsed().as_secs_f64();

    let vocab_size = corpus.vocab.len();
    let t = Instant::now();
    let text_standard = text_cvae::train(&train, &spec_vae, cfg.text_cvae(vocab_size, PriorMode::Standard))?.model;
    times.text_standard = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let text_spec = text_cvae::train(&train, &spec_vae, cfg.text_cvae(vocab_size, PriorMode::SpecPosterior))?.model;
    times.text_spec = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let gan_training = gan::train_gan(&train, &spec_vae, &text_standard, cfg.gan())?;
    times.gan = t.elapsed().as_secs_f64();

    let GanTraining {
        model: gan_model,
        steps: gan_steps,
        epoch_mse: gan_epoch_mse,
    } = gan_training;
    let models = Models {
        spec_vae,
        text_standard: Some(Arc::new(text_standard)),
        text_spec: Some(Arc::new(text_spec)),
        gan: Some(gan_model),
        vocab: corpus.vocab.clone(),
        scorer: Scorer::Likelihood,
    };
    Ok(DeskRun {
        models,
        train_idx,
        heldout_idx,
        gan_steps,
        gan_epoch_mse,
        times,
    })
}

/// Writes every model of `models` into `dir` in the layout [`Models::load`] expects.
pub fn save_models(models: &Models, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    models.spec_vae.save(dir)?;
    models.vocab.save(&dir.join(layout::VOCAB))?;
    if let Some(t) = &models.text_standard {
        t.save(dir, layout::TEXT_STANDARD)?;
    }
    if let Some(t) = &models.text_spec {
        t.save(dir, layout::TEXT_SPEC)?;
    }
    if let Some(g) = &models.gan {
        g.save(dir)?;
    }
    Ok(())
}
