//! Adversarial mapping from audio latents to text latents.
//!
//! The generator maps `z_s` to a predicted text latent; the discriminator sees
//! `[z_t; z_s]` (real) or `[G(z_s); z_s]` (fake). An auxiliary squared-error
//! term ties the prediction to the paired text latent.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LyricLine, PairedExample};
use crate::error::{Error, Result};
use crate::latent::{self, DiagonalGaussian};
use crate::nn::{self, CheckpointPaths, LossHistory, Mlp, ParamStore};
use crate::spec_vae::SpecVae;
use crate::text_cvae::TextCvae;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_mse: f64,
    pub temperature: f64,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl GanConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 6,
            lambda_mse: 1.0,
            temperature: 1.0,
            hidden_dims: vec![256, 256],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim and batch_size must be positive".into()));
        }
        if !(self.lambda_mse >= 0.0) {
            return Err(Error::Config("lambda_mse must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config("invalid learning rate or temperature".into()));
        }
        if self.hidden_dims.len() != 2 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "generator and discriminator have exactly two positive hidden widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub mse: f64,
    pub g_total: f64,
}

/// Losses from discriminator logits and the per-row squared error `‖ẑ_t − z_t‖²`.
///
/// `d_loss = −mean[log D(z) + log(1 − D(ẑ))]`, `g_adv = −mean[log D(ẑ)]`,
/// `g_total = g_adv + lambda_mse · mse`.
pub fn losses_from_logits(
    real_logits: &[f64],
    fake_logits: &[f64],
    sq_errors: &[f64],
    lambda_mse: f64,
) -> GanLosses {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let n = real_logits.len() as f64;
    let d_loss = real_logits
        .iter()
        .zip(fake_logits)
        .map(|(r, f)| softplus(-r) + softplus(*f))
        .sum::<f64>()
        / n;
    let g_adv_loss = fake_logits.iter().map(|f| softplus(-f)).sum::<f64>() / n;
    let mse = sq_errors.iter().sum::<f64>() / n;
    GanLosses {
        d_loss,
        g_adv_loss,
        mse,
        g_total: g_adv_loss + lambda_mse * mse,
    }
}

pub struct GanModel {
    cfg: GanConfig,
    g_store: ParamStore,
    d_store: ParamStore,
    generator: Mlp,
    discriminator: Mlp,
}

impl GanModel {
    pub fn new(cfg: GanConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: GanConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut g_store = ParamStore::new(cfg.seed, dtype);
        let mut d_store = ParamStore::new(cfg.seed.wrapping_add(1), dtype);
        let l = cfg.latent_dim;
        let generator = Mlp::new(&mut g_store, "gen", l, &cfg.hidden_dims, l)?;
        let discriminator = Mlp::new(&mut d_store, "disc", 2 * l, &cfg.hidden_dims, 1)?;
        Ok(Self {
            cfg,
            g_store,
            d_store,
            generator,
            discriminator,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.g_store
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.d_store
    }

    fn dtype(&self) -> DType {
        self.g_store.dtype()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.latent_dim,
                actual: v.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn generate_tensor(&self, z_s: &Tensor) -> Result<Tensor> {
        self.generator.forward(z_s)
    }

    /// Discriminator logits for `[text_like; z_s]`, shape `(batch,)`.
    pub(crate) fn logits_tensor(&self, text_like: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        let input = Tensor::cat(&[text_like, z_s], 1)?;
        Ok(self.discriminator.forward(&input)?.squeeze(1)?)
    }

    pub fn predict_text_latent(&self, z_s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[z_s.to_vec()])?.remove(0))
    }

    pub fn predict_batch(&self, z_s: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if z_s.is_empty() {
            return Ok(Vec::new());
        }
        for z in z_s {
            self.check(z)?;
        }
        nn::rows_f64(&self.generate_tensor(&nn::matrix(z_s, self.dtype())?)?)
    }

    /// `D([z_t_like; z_s])`, a probability in (0, 1).
    pub fn discriminator_score(&self, z_t_like: &[f64], z_s: &[f64]) -> Result<f64> {
        self.check(z_t_like)?;
        self.check(z_s)?;
        let t = nn::matrix(&[z_t_like.to_vec()], self.dtype())?;
        let s = nn::matrix(&[z_s.to_vec()], self.dtype())?;
        let logit = nn::flatten_f64(&self.logits_tensor(&t, &s)?)?[0];
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    /// The discriminator's raw input for a pair: `[z_t_like; z_s]`.
    pub fn discriminator_input(z_t_like: &[f64], z_s: &[f64]) -> Vec<f64> {
        z_t_like.iter().chain(z_s).copied().collect()
    }

    /// All four losses on a batch of `(z_s, z_t)` pairs.
    pub fn gan_losses(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<GanLosses> {
        if batch.is_empty() {
            return Err(Error::Empty("empty GAN batch".into()));
        }
        let (z_s, z_t) = self.batch_tensors(batch)?;
        let fake = self.generate_tensor(&z_s)?;
        let real_logits = nn::flatten_f64(&self.logits_tensor(&z_t, &z_s)?)?;
        let fake_logits = nn::flatten_f64(&self.logits_tensor(&fake, &z_s)?)?;
        let sq = nn::flatten_f64(&(fake - &z_t)?.sqr()?.sum(D::Minus1)?)?;
        let losses = losses_from_logits(&real_logits, &fake_logits, &sq, self.cfg.lambda_mse);
        nn::check_finite(
            0,
            &[("d_loss", losses.d_loss), ("g_total", losses.g_total)],
        )?;
        Ok(losses)
    }

    fn batch_tensors(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<(Tensor, Tensor)> {
        for (s, t) in batch {
            self.check(s)?;
            self.check(t)?;
        }
        let z_s: Vec<Vec<f64>> = batch.iter().map(|(s, _)| s.clone()).collect();
        let z_t: Vec<Vec<f64>> = batch.iter().map(|(_, t)| t.clone()).collect();
        Ok((nn::matrix(&z_s, self.dtype())?, nn::matrix(&z_t, self.dtype())?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        CheckpointPaths::new(dir, "gan_generator").write(&self.g_store, &self.cfg)?;
        CheckpointPaths::new(dir, "gan_discriminator").write(&self.d_store, &self.cfg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let g = CheckpointPaths::new(dir, "gan_generator");
        let cfg: GanConfig = g.read_config()?;
        let mut model = Self::new(cfg)?;
        model.g_store.load(&g.weights)?;
        model
            .d_store
            .load(&CheckpointPaths::new(dir, "gan_discriminator").weights)?;
        Ok(model)
    }
}

/// Alternating optimizer: one discriminator step, then one generator step.
pub struct GanTrainer {
    model: GanModel,
    d_opt: candle_nn::AdamW,
    g_opt: candle_nn::AdamW,
}

impl GanTrainer {
    pub fn new(model: GanModel) -> Result<Self> {
        let lr = model.cfg.learning_rate;
        let d_opt = nn::adam(model.d_store.vars(), lr)?;
        let g_opt = nn::adam(model.g_store.vars(), lr)?;
        Ok(Self { model, d_opt, g_opt })
    }

    pub fn model(&self) -> &GanModel {
        &self.model
    }

    pub fn into_model(self) -> GanModel {
        self.model
    }

    /// Updates the discriminator only; returns its loss.
    pub fn d_step(&mut self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        let (z_s, z_t) = self.model.batch_tensors(batch)?;
        let fake = self.model.generate_tensor(&z_s)?.detach();
        let real = self.model.logits_tensor(&z_t, &z_s)?;
        let fake = self.model.logits_tensor(&fake, &z_s)?;
        let loss = (nn::softplus(&real.neg()?)? + nn::softplus(&fake)?)?.mean_all()?;
        let value = nn::scalar_f64(&loss)?;
        nn::check_finite(0, &[("d_loss", value)])?;
        nn::backward_step(&mut self.d_opt, &loss)?;
        Ok(value)
    }

    /// Updates the generator only; returns `(g_adv_loss, mse, g_total)`.
    pub fn g_step(&mut self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, f64, f64)> {
        let (z_s, z_t) = self.model.batch_tensors(batch)?;
        let fake = self.model.generate_tensor(&z_s)?;
        let adv = nn::softplus(&self.model.logits_tensor(&fake, &z_s)?.neg()?)?.mean_all()?;
        let mse = (&fake - &z_t)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        let total = (&adv + (&mse * self.model.cfg.lambda_mse)?)?;
        let (a, m, t) = (
            nn::scalar_f64(&adv)?,
            nn::scalar_f64(&mse)?,
            nn::scalar_f64(&total)?,
        );
        nn::check_finite(0, &[("g_adv_loss", a), ("mse", m), ("g_total", t)])?;
        nn::backward_step(&mut self.g_opt, &total)?;
        Ok((a, m, t))
    }
}

pub struct GanTraining {
    pub model: GanModel,
    /// Columns: d_loss, g_adv_loss, mse, g_total (one row per step).
    pub steps: LossHistory,
    /// Mean squared error of each epoch.
    pub epoch_mse: Vec<f64>,
}

/// Source of fresh `(z_s, z_t)` training pairs, redrawn every epoch.
pub trait LatentPairs {
    fn len(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

/// Pairs drawn from audio posteriors and the text posterior of each line given the drawn `z_s`.
pub struct PosteriorPairs<'a> {
    pub spec_posteriors: Vec<DiagonalGaussian>,
    pub lines: Vec<&'a LyricLine>,
    pub text_model: &'a TextCvae,
    pub temperature: f64,
}

impl<'a> PosteriorPairs<'a> {
    pub fn new(
        examples: &'a [PairedExample],
        spec_vae: &SpecVae,
        text_model: &'a TextCvae,
        temperature: f64,
    ) -> Result<Self> {
        if spec_vae.latent_dim() != text_model.latent_dim() {
            return Err(Error::Config("spec-VAE and text-CVAE latent sizes differ".into()));
        }
        let specs: Vec<_> = examples.iter().map(|e| e.spectrogram.as_ref()).collect();
        Ok(Self {
            spec_posteriors: spec_vae.encode_all(&specs)?,
            lines: examples.iter().map(|e| &e.line).collect(),
            text_model,
            temperature,
        })
    }
}

impl LatentPairs for PosteriorPairs<'_> {
    fn len(&self) -> usize {
        self.lines.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let z_s: Vec<Vec<f64>> = self
            .spec_posteriors
            .iter()
            .map(|p| latent::sample(p, self.temperature, rng))
            .collect();
        let mut out = Vec::with_capacity(z_s.len());
        for (lines, zs) in self.lines.chunks(64).zip(z_s.chunks(64)) {
            let posts = self.text_model.encode_batch(lines, zs)?;
            for (p, s) in posts.iter().zip(zs) {
                out.push((s.clone(), latent::sample(p, self.temperature, rng)));
            }
        }
        Ok(out)
    }
}

/// Trains a GAN from scratch on pairs from `source`.
pub fn train_on_pairs(source: &dyn LatentPairs, cfg: GanConfig) -> Result<GanTraining> {
    if source.len() == 0 {
        return Err(Error::Empty("GAN training set is empty".into()));
    }
    let mut trainer = GanTrainer::new(GanModel::new(cfg.clone())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a17_0001);
    let mut steps = LossHistory::new(&["d_loss", "g_adv_loss", "mse", "g_total"]);
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut pairs = source.draw(&mut rng)?;
        pairs.shuffle(&mut rng);
        let mut mse_sum = 0.0;
        let mut batches = 0;
        for batch in pairs.chunks(cfg.batch_size) {
            let d = trainer.d_step(batch)?;
            let (adv, mse, total) = trainer.g_step(batch)?;
            steps.push(&[d, adv, mse, total]);
            mse_sum += mse;
            batches += 1;
        }
        epoch_mse.push(mse_sum / batches as f64);
    }
    Ok(GanTraining {
        model: trainer.into_model(),
        steps,
        epoch_mse,
    })
}

/// Trains the aligner on paired data using frozen upstream models.
pub fn train_gan(
    examples: &[PairedExample],
    spec_vae: &SpecVae,
    text_model: &TextCvae,
    cfg: GanConfig,
) -> Result<GanTraining> {
    if cfg.latent_dim != spec_vae.latent_dim() {
        return Err(Error::Config("GAN latent_dim differs from the spec-VAE".into()));
    }
    let pairs = PosteriorPairs::new(examples, spec_vae, text_model, cfg.temperature)?;
    train_on_pairs(&pairs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GanConfig {
        GanConfig {
            hidden_dims: vec![16, 16],
            ..GanConfig::new(4)
        }
    }

    #[test]
    fn even_odds_discriminator_loss() {
        let l = losses_from_logits(&[0.0; 5], &[0.0; 5], &[0.0; 5], 1.0);
        assert!((l.d_loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.d_loss - 1.3863).abs() < 1e-4);
        assert_eq!(l.mse, 0.0);
        let l = losses_from_logits(&[0.3, -1.0], &[2.0, 0.1], &[4.0, 1.0], 0.0);
        assert_eq!(l.g_total, l.g_adv_loss);
    }

    #[test]
    fn shapes_and_determinism() {
        let m = GanModel::new(small()).unwrap();
        let z = [0.5, -1.0, 2.0, 0.0];
        let a = m.predict_text_latent(&z).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, m.predict_text_latent(&z).unwrap());
        assert!(m.predict_text_latent(&[0.0; 4]).unwrap().iter().all(|v| v.is_finite()));
        assert!(m.predict_text_latent(&[0.0; 3]).is_err());
        let p = m.discriminator_score(&a, &z).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, m.discriminator_score(&a, &z).unwrap());
    }

    #[test]
    fn discriminator_input_is_text_then_spec() {
        assert_eq!(
            GanModel::discriminator_input(&[1.0, 2.0], &[3.0, 4.0]),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        // Swapping the halves changes the score, so order matters to the network.
        let m = GanModel::new(small()).unwrap();
        let t = [1.0, 0.0, -1.0, 2.0];
        let s = [-3.0, 0.5, 0.5, 1.0];
        assert_ne!(
            m.discriminator_score(&t, &s).unwrap(),
            m.discriminator_score(&s, &t).unwrap()
        );
    }

    #[test]
    fn loss_decomposition_holds() {
        let m = GanModel::new(small()).unwrap();
        let batch = vec![
            (vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -1.0, 0.0, 0.5]),
            (vec![-0.5, 0.0, 1.5, 0.2], vec![0.0, 0.0, 2.0, -0.5]),
        ];
        let l = m.gan_losses(&batch).unwrap();
        assert!(((l.g_total - m.config().lambda_mse * l.mse) - l.g_adv_loss).abs() < 1e-12);
    }

    #[test]
    fn updates_touch_only_their_network() {
        let mut trainer = GanTrainer::new(GanModel::new(small()).unwrap()).unwrap();
        let batch = vec![(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -1.0, 0.0, 0.5]); 3];
        let g0 = trainer.model().generator_params().snapshot().unwrap();
        let d0 = trainer.model().discriminator_params().snapshot().unwrap();
        trainer.d_step(&batch).unwrap();
        let g1 = trainer.model().generator_params().snapshot().unwrap();
        let d1 = trainer.model().discriminator_params().snapshot().unwrap();
        assert_eq!(g0, g1);
        assert_ne!(d0, d1);
        trainer.g_step(&batch).unwrap();
        assert_eq!(d1, trainer.model().discriminator_params().snapshot().unwrap());
        assert_ne!(g1, trainer.model().generator_params().snapshot().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = GanModel::new(small()).unwrap();
        m.save(dir.path()).unwrap();
        let n = GanModel::load(dir.path()).unwrap();
        let z = [0.3, 0.3, -0.3, 1.0];
        assert_eq!(m.predict_text_latent(&z).unwrap(), n.predict_text_latent(&z).unwrap());
        assert_eq!(
            m.discriminator_score(&z, &z).unwrap(),
            n.discriminator_score(&z, &z).unwrap()
        );
    }
}
