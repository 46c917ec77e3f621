//! Conditional recurrent VAE over lyric lines.
//!
//! The encoder is a single-layer bidirectional LSTM whose every input step is
//! the word embedding concatenated with the audio latent `z_s`; the decoder is
//! a unidirectional LSTM fed `[embedding; z_t; z_s]` at every step. The KL
//! term pulls the text posterior towards either `N(0, I)` or the audio
//! posterior of the paired clip.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::Module;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LyricLine, Vocabulary, BOS, EOS, MAX_LINE_LEN, PAD, UNK};
use crate::error::{Error, Result};
use crate::latent::{self, DiagonalGaussian};
use crate::nn::{self, CheckpointPaths, LossHistory, LstmCell, ParamStore};
use crate::spec_vae::SpecVae;

/// Which distribution the KL term regularizes the text posterior towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Standard,
    SpecPosterior,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "spec" | "spec_posterior" => Ok(Self::SpecPosterior),
            other => Err(Error::Config(format!("unknown prior mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCvaeConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub prior_mode: PriorMode,
    /// KL weight reached at the end of annealing.
    pub kl_weight_max: f64,
    /// Fraction of all training steps over which the KL weight ramps up linearly from 0.
    pub kl_anneal_fraction: f64,
    pub word_dropout_p: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// At inference in spec-posterior mode, reuse the `z_s` sample as `z_t`
    /// instead of drawing a second independent sample.
    pub reuse_spec_sample: bool,
    /// Feed `[z_t; z_s]` to the decoder. When false the decoder sees `z_t`
    /// only and the audio reaches it solely through the text latent.
    #[serde(default = "default_true")]
    pub decoder_sees_spec: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl TextCvaeConfig {
    pub fn new(vocab_size: usize, prior_mode: PriorMode) -> Self {
        Self {
            vocab_size,
            hidden_dim: 300,
            latent_dim: 128,
            embedding_dim: 300,
            prior_mode,
            kl_weight_max: 1.0,
            kl_anneal_fraction: 0.2,
            word_dropout_p: 0.3,
            max_len: MAX_LINE_LEN,
            epochs: 500,
            max_steps: None,
            learning_rate: 1e-3,
            batch_size: 32,
            temperature: 1.0,
            reuse_spec_sample: false,
            decoder_sees_spec: true,
            seed: 0,
        }
    }

    /// Small recurrent sizes for the desk-scale corpus.
    pub fn desk(vocab_size: usize, latent_dim: usize, prior_mode: PriorMode) -> Self {
        Self {
            hidden_dim: 64,
            latent_dim,
            embedding_dim: 32,
            ..Self::new(vocab_size, prior_mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config("vocabulary must hold at least one word".into()));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.word_dropout_p) {
            return Err(Error::Config(format!(
                "word_dropout_p must lie in [0, 1), got {}",
                self.word_dropout_p
            )));
        }
        if self.max_len == 0 || self.max_len > MAX_LINE_LEN {
            return Err(Error::Config(format!("max_len must be in 1..={MAX_LINE_LEN}")));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if !(self.kl_weight_max >= 0.0) || !(0.0..=1.0).contains(&self.kl_anneal_fraction) {
            return Err(Error::Config("invalid KL annealing settings".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear KL warm-up: 0 at step 0, `max` from `fraction * total_steps` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlAnneal {
    pub max: f64,
    pub warmup_steps: usize,
}

impl KlAnneal {
    pub fn new(max: f64, fraction: f64, total_steps: usize) -> Self {
        Self {
            max,
            warmup_steps: (fraction * total_steps as f64).round() as usize,
        }
    }

    pub fn weight(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.max;
        }
        self.max * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Loss terms averaged over a batch; `reconstruction` is the summed token
/// cross-entropy of each line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub(crate) struct CvaeLossTensors {
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

impl CvaeLossTensors {
    fn values(&self) -> Result<CvaeLoss> {
        Ok(CvaeLoss {
            reconstruction: nn::scalar_f64(&self.reconstruction)?,
            kl: nn::scalar_f64(&self.kl)?,
            total: nn::scalar_f64(&self.total)?,
        })
    }
}

/// One training item: a line and the audio posterior of its clip.
#[derive(Debug, Clone)]
pub struct TextExample<'a> {
    pub line: &'a LyricLine,
    pub spec_posterior: &'a DiagonalGaussian,
}

/// Padded token batch with per-row lengths.
struct TokenBatch {
    ids: Vec<Vec<u32>>,
    lengths: Vec<usize>,
    width: usize,
}

impl TokenBatch {
    fn new(rows: Vec<Vec<u32>>) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = rows.iter().map(Vec::len).collect();
        let ids = rows
            .into_iter()
            .map(|mut r| {
                r.resize(width, PAD);
                r
            })
            .collect();
        Self {
            ids,
            lengths,
            width,
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        let flat: Vec<u32> = self.ids.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.ids.len(), self.width), &Device::Cpu)?)
    }

    /// `(batch, width, 1)` indicator of valid positions.
    fn mask(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self
            .lengths
            .iter()
            .flat_map(|&l| (0..self.width).map(move |t| if t < l { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(flat, (self.ids.len(), self.width, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `(batch, width, 1)` indicator of the last valid position.
    fn last_mask(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self
            .lengths
            .iter()
            .flat_map(|&l| (0..self.width).map(move |t| if t + 1 == l { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(flat, (self.ids.len(), self.width, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub struct TextCvae {
    cfg: TextCvaeConfig,
    store: ParamStore,
    embedding: candle_nn::Embedding,
    enc_fwd: LstmCell,
    enc_bwd: LstmCell,
    mean_head: candle_nn::Linear,
    log_std_head: candle_nn::Linear,
    decoder: LstmCell,
    output: candle_nn::Linear,
}

impl TextCvae {
    pub fn new(cfg: TextCvaeConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: TextCvaeConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let (e, h, l) = (cfg.embedding_dim, cfg.hidden_dim, cfg.latent_dim);
        let embedding = nn::embedding(&mut store, "embedding", cfg.vocab_size, e)?;
        let enc_fwd = LstmCell::new(&mut store, "enc.fwd", e + l, h)?;
        let enc_bwd = LstmCell::new(&mut store, "enc.bwd", e + l, h)?;
        let mean_head = nn::linear(&mut store, "enc.mean", 2 * h, l)?;
        let log_std_head = nn::linear(&mut store, "enc.log_std", 2 * h, l)?;
        let cond_dim = if cfg.decoder_sees_spec { 2 * l } else { l };
        let decoder = LstmCell::new(&mut store, "dec.lstm", e + cond_dim, h)?;
        let output = nn::linear(&mut store, "dec.out", h, cfg.vocab_size)?;
        Ok(Self {
            cfg,
            store,
            embedding,
            enc_fwd,
            enc_bwd,
            mean_head,
            log_std_head,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &TextCvaeConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn prior_mode(&self) -> PriorMode {
        self.cfg.prior_mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_latent(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.latent_dim,
                actual: v.len(),
            });
        }
        Ok(())
    }

    fn check_line(&self, line: &LyricLine) -> Result<()> {
        if line.is_empty() {
            return Err(Error::Empty("lyric line has no tokens".into()));
        }
        if let Some(&t) = line.tokens().iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Config(format!("token id {t} outside the model vocabulary")));
        }
        Ok(())
    }

    /// Runs `cell` over `inputs` `(batch, time, in)` and returns the hidden state at
    /// each row's last valid step.
    fn run_to_last(&self, cell: &LstmCell, inputs: &Tensor, batch: &TokenBatch) -> Result<Tensor> {
        let projected = cell.project_inputs(inputs)?;
        let (mut h, mut c) = cell.zero_state(batch.ids.len(), self.dtype())?;
        let mut hs = Vec::with_capacity(batch.width);
        for t in 0..batch.width {
            (h, c) = cell.step(&projected.i((.., t, ..))?, &h, &c)?;
            hs.push(h.clone());
        }
        let hs = Tensor::stack(&hs, 1)?;
        Ok(hs.broadcast_mul(&batch.last_mask(self.dtype())?)?.sum(1)?)
    }

    /// Posterior mean and log-stddev tensors for a batch of lines and audio latents `(batch, latent)`.
    pub(crate) fn encode_tensor(&self, lines: &[&LyricLine], z_s: &Tensor) -> Result<(Tensor, Tensor)> {
        let fwd = TokenBatch::new(lines.iter().map(|l| l.tokens().to_vec()).collect());
        let bwd = TokenBatch::new(
            lines
                .iter()
                .map(|l| l.tokens().iter().rev().copied().collect())
                .collect(),
        );
        let cond = z_s.unsqueeze(1)?.repeat((1, fwd.width, 1))?;
        let fwd_in = Tensor::cat(&[self.embedding.forward(&fwd.tensor()?)?, cond.clone()], 2)?;
        let bwd_in = Tensor::cat(&[self.embedding.forward(&bwd.tensor()?)?, cond], 2)?;
        let h_f = self.run_to_last(&self.enc_fwd, &fwd_in, &fwd)?;
        let h_b = self.run_to_last(&self.enc_bwd, &bwd_in, &bwd)?;
        let h = Tensor::cat(&[h_f, h_b], 1)?;
        Ok((self.mean_head.forward(&h)?, self.log_std_head.forward(&h)?))
    }

    /// Per-row decoder conditioning vector.
    fn decoder_condition(&self, z_t: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        if self.cfg.decoder_sees_spec {
            Ok(Tensor::cat(&[z_t, z_s], 1)?)
        } else {
            Ok(z_t.clone())
        }
    }

    /// Teacher-forced logits `(batch, time, vocab)` for decoder inputs `[BOS, x_1..x_n]`.
    fn teacher_forced_logits(&self, inputs: &TokenBatch, z_t: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        let cond = self.decoder_condition(z_t, z_s)?.unsqueeze(1)?.repeat((1, inputs.width, 1))?;
        let x = Tensor::cat(&[self.embedding.forward(&inputs.tensor()?)?, cond], 2)?;
        let projected = self.decoder.project_inputs(&x)?;
        let (mut h, mut c) = self.decoder.zero_state(inputs.ids.len(), self.dtype())?;
        let mut hs = Vec::with_capacity(inputs.width);
        for t in 0..inputs.width {
            (h, c) = self.decoder.step(&projected.i((.., t, ..))?, &h, &c)?;
            hs.push(h.clone());
        }
        Ok(self.output.forward(&Tensor::stack(&hs, 1)?)?)
    }

    fn decoder_io(lines: &[&LyricLine], dropout: Option<(f64, &mut ChaCha8Rng)>) -> (TokenBatch, TokenBatch) {
        let mut inputs: Vec<Vec<u32>> = lines
            .iter()
            .map(|l| std::iter::once(BOS).chain(l.tokens().iter().copied()).collect())
            .collect();
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                for row in &mut inputs {
                    for tok in row.iter_mut().skip(1) {
                        if rng.random::<f64>() < p {
                            *tok = UNK;
                        }
                    }
                }
            }
        }
        let targets = lines
            .iter()
            .map(|l| l.tokens().iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        (TokenBatch::new(inputs), TokenBatch::new(targets))
    }

    /// Per-row summed log-probability of `targets` under `logits`.
    fn target_log_probs(logits: &Tensor, targets: &TokenBatch, dtype: DType) -> Result<Tensor> {
        let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
        let idx = targets.tensor()?.unsqueeze(2)?;
        let picked = log_p.gather(&idx, 2)?;
        Ok((picked * targets.mask(dtype)?)?.sum(1)?.squeeze(1)?)
    }

    /// Batch loss with explicit audio latents, text noise and prior.
    ///
    /// `prior` is `None` for the standard-normal prior, otherwise the per-row mean
    /// and log-stddev of the audio posterior.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn loss_tensors(
        &self,
        lines: &[&LyricLine],
        z_s: &Tensor,
        eps_t: &Tensor,
        prior: Option<(&Tensor, &Tensor)>,
        kl_weight: f64,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<CvaeLossTensors> {
        let (mean, log_std) = self.encode_tensor(lines, z_s)?;
        let z_t = (&mean + ((eps_t * log_std.exp()?)? * self.cfg.temperature)?)?;
        let dropout = dropout_rng.map(|r| (self.cfg.word_dropout_p, r));
        let (inputs, targets) = Self::decoder_io(lines, dropout);
        let logits = self.teacher_forced_logits(&inputs, &z_t, z_s)?;
        let log_p = Self::target_log_probs(&logits, &targets, self.dtype())?;
        let reconstruction = log_p.neg()?.mean_all()?;
        let kl_rows = match prior {
            None => nn::kl_standard_rows(&mean, &log_std)?,
            Some((pm, pl)) => nn::kl_between_rows(&mean, &log_std, pm, pl)?,
        };
        let kl = kl_rows.mean_all()?;
        let total = (&reconstruction + (&kl * kl_weight)?)?;
        Ok(CvaeLossTensors {
            reconstruction,
            kl,
            total,
        })
    }

    /// Text posterior `q(z_t | line, z_s)`.
    pub fn encode(&self, line: &LyricLine, z_s: &[f64]) -> Result<DiagonalGaussian> {
        Ok(self.encode_batch(&[line], &[z_s.to_vec()])?.remove(0))
    }

    pub fn encode_batch(&self, lines: &[&LyricLine], z_s: &[Vec<f64>]) -> Result<Vec<DiagonalGaussian>> {
        if lines.len() != z_s.len() {
            return Err(Error::DimensionMismatch {
                expected: lines.len(),
                actual: z_s.len(),
            });
        }
        if lines.is_empty() {
            return Ok(Vec::new());
        }
        for (l, z) in lines.iter().zip(z_s) {
            self.check_line(l)?;
            self.check_latent(z)?;
        }
        let zs = nn::matrix(z_s, self.dtype())?;
        let (mean, log_std) = self.encode_tensor(lines, &zs)?;
        nn::gaussians_from_rows(&mean, &log_std)
    }

    /// Loss for one batch of examples.
    ///
    /// `z_s` is drawn from each example's audio posterior and `z_t` from the text
    /// posterior, both at the configured temperature, with noise from `seed`.
    pub fn loss(
        &self,
        batch: &[TextExample<'_>],
        kl_weight: f64,
        prior_mode: PriorMode,
        seed: u64,
    ) -> Result<CvaeLoss> {
        self.seeded_loss(batch, kl_weight, prior_mode, seed)?.values()
    }

    /// [`TextCvae::loss`] together with its gradient with respect to every parameter.
    pub fn loss_gradients(
        &self,
        batch: &[TextExample<'_>],
        kl_weight: f64,
        prior_mode: PriorMode,
        seed: u64,
    ) -> Result<(CvaeLoss, BTreeMap<String, Vec<f64>>)> {
        let t = self.seeded_loss(batch, kl_weight, prior_mode, seed)?;
        Ok((t.values()?, nn::gradients(&self.store, &t.total)?))
    }

    fn seeded_loss(
        &self,
        batch: &[TextExample<'_>],
        kl_weight: f64,
        prior_mode: PriorMode,
        seed: u64,
    ) -> Result<CvaeLossTensors> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lines, z_s, eps, prior) = self.prepare_batch(batch, &mut rng)?;
        let prior_ref = match prior_mode {
            PriorMode::Standard => None,
            PriorMode::SpecPosterior => Some((&prior.0, &prior.1)),
        };
        self.loss_tensors(&lines, &z_s, &eps, prior_ref, kl_weight, None)
    }

    #[allow(clippy::type_complexity)]
    fn prepare_batch<'a>(
        &self,
        batch: &[TextExample<'a>],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<&'a LyricLine>, Tensor, Tensor, (Tensor, Tensor))> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let mut z_s = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_line(ex.line)?;
            if ex.spec_posterior.dim() != self.cfg.latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.cfg.latent_dim,
                    actual: ex.spec_posterior.dim(),
                });
            }
            z_s.push(latent::sample(ex.spec_posterior, self.cfg.temperature, rng));
            eps.push(latent::standard_normal_vec(self.cfg.latent_dim, rng));
        }
        let posts: Vec<&DiagonalGaussian> = batch.iter().map(|e| e.spec_posterior).collect();
        let prior = nn::gaussian_tensors(&posts, self.dtype())?;
        Ok((
            batch.iter().map(|e| e.line).collect(),
            nn::matrix(&z_s, self.dtype())?,
            nn::matrix(&eps, self.dtype())?,
            prior,
        ))
    }

    /// Generates one line from `z_t` and `z_s`. The model holds no vocabulary, so the
    /// line's source text is empty; render it with [`line_text`].
    pub fn decode(&self, z_t: &[f64], z_s: &[f64], strategy: DecodeStrategy) -> Result<LyricLine> {
        let ids = self.decode_batch(&[z_t.to_vec()], &[z_s.to_vec()], strategy)?.remove(0);
        LyricLine::new(ids, String::new())
    }

    /// Generates one token sequence per `(z_t, z_s)` row. Sequences never contain
    /// control tokens, hold at least one token and at most `max_len`.
    pub fn decode_batch(
        &self,
        z_t: &[Vec<f64>],
        z_s: &[Vec<f64>],
        strategy: DecodeStrategy,
    ) -> Result<Vec<Vec<u32>>> {
        if z_t.len() != z_s.len() {
            return Err(Error::DimensionMismatch {
                expected: z_t.len(),
                actual: z_s.len(),
            });
        }
        if z_t.is_empty() {
            return Ok(Vec::new());
        }
        for (a, b) in z_t.iter().zip(z_s) {
            self.check_latent(a)?;
            self.check_latent(b)?;
        }
        let n = z_t.len();
        let vocab = self.cfg.vocab_size;
        let cond = self.decoder_condition(&nn::matrix(z_t, self.dtype())?, &nn::matrix(z_s, self.dtype())?)?;
        // Control tokens are never emitted; EOS is allowed only after the first token.
        let mut ban_first = vec![0f64; vocab];
        let mut ban_rest = vec![0f64; vocab];
        for t in [PAD, BOS, UNK] {
            ban_first[t as usize] = f64::NEG_INFINITY;
            ban_rest[t as usize] = f64::NEG_INFINITY;
        }
        ban_first[EOS as usize] = f64::NEG_INFINITY;

        let mut rng = match strategy {
            DecodeStrategy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeStrategy::Greedy => None,
        };
        let (mut h, mut c) = self.decoder.zero_state(n, self.dtype())?;
        let mut prev = vec![BOS; n];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for step in 0..self.cfg.max_len {
            let prev_t = Tensor::from_vec(prev.clone(), n, &Device::Cpu)?;
            let x = Tensor::cat(&[self.embedding.forward(&prev_t)?, cond.clone()], 1)?;
            let projected = self.decoder.project_inputs(&x.unsqueeze(1)?)?.squeeze(1)?;
            (h, c) = self.decoder.step(&projected, &h, &c)?;
            let logits = nn::rows_f64(&self.output.forward(&h)?)?;
            let ban = if step == 0 { &ban_first } else { &ban_rest };
            for (i, row) in logits.iter().enumerate() {
                if done[i] {
                    continue;
                }
                let scores: Vec<f64> = row.iter().zip(ban).map(|(a, b)| a + b).collect();
                let tok = match (&strategy, rng.as_mut()) {
                    (DecodeStrategy::Sample { temperature, .. }, Some(r)) if *temperature > 0.0 => {
                        sample_categorical(&scores, *temperature, r)
                    }
                    _ => argmax(&scores),
                };
                if tok == EOS {
                    done[i] = true;
                } else {
                    out[i].push(tok);
                    prev[i] = tok;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Summed log-probability and token count (including EOS) of each line given its latents.
    pub fn log_likelihood(
        &self,
        lines: &[&LyricLine],
        z_t: &[Vec<f64>],
        z_s: &[Vec<f64>],
    ) -> Result<Vec<(f64, usize)>> {
        if lines.len() != z_t.len() || lines.len() != z_s.len() {
            return Err(Error::DimensionMismatch {
                expected: lines.len(),
                actual: z_t.len().min(z_s.len()),
            });
        }
        if lines.is_empty() {
            return Ok(Vec::new());
        }
        for l in lines {
            self.check_line(l)?;
        }
        let (inputs, targets) = Self::decoder_io(lines, None);
        let logits = self.teacher_forced_logits(
            &inputs,
            &nn::matrix(z_t, self.dtype())?,
            &nn::matrix(z_s, self.dtype())?,
        )?;
        let lp = nn::flatten_f64(&Self::target_log_probs(&logits, &targets, self.dtype())?)?;
        Ok(lp.into_iter().zip(targets.lengths.iter().copied()).collect())
    }

    /// Fraction of target tokens (EOS included) predicted correctly under teacher
    /// forcing, with both latents at their posterior means.
    pub fn teacher_forced_accuracy(&self, batch: &[TextExample<'_>]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in batch.chunks(64) {
            let lines: Vec<&LyricLine> = chunk.iter().map(|e| e.line).collect();
            let z_s: Vec<Vec<f64>> = chunk.iter().map(|e| e.spec_posterior.mean().to_vec()).collect();
            let posts = self.encode_batch(&lines, &z_s)?;
            let z_t: Vec<Vec<f64>> = posts.iter().map(|p| p.mean().to_vec()).collect();
            let (inputs, targets) = Self::decoder_io(&lines, None);
            let logits = self.teacher_forced_logits(
                &inputs,
                &nn::matrix(&z_t, self.dtype())?,
                &nn::matrix(&z_s, self.dtype())?,
            )?;
            let pred = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
            for (row, (tgt, &len)) in pred.iter().zip(targets.ids.iter().zip(&targets.lengths)) {
                for t in 0..len {
                    total += 1;
                    if row[t] == tgt[t] {
                        correct += 1;
                    }
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        CheckpointPaths::new(dir, stem).write(&self.store, &self.cfg)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let paths = CheckpointPaths::new(dir, stem);
        let cfg: TextCvaeConfig = paths.read_config()?;
        let mut model = Self::new(cfg)?;
        model.store.load(&paths.weights)?;
        Ok(model)
    }
}

fn argmax(scores: &[f64]) -> u32 {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_categorical<R: Rng>(scores: &[f64], temperature: f64, rng: &mut R) -> u32 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 && *w > 0.0 {
            return i as u32;
        }
    }
    argmax(scores)
}

pub struct TextCvaeTraining {
    pub model: TextCvae,
    /// Columns: reconstruction, kl, total, kl_weight (one row per optimizer step).
    pub steps: LossHistory,
}

/// Trains on lines paired with fixed audio posteriors.
pub fn train_with_posteriors(
    examples: &[TextExample<'_>],
    cfg: TextCvaeConfig,
) -> Result<TextCvaeTraining> {
    if examples.is_empty() {
        return Err(Error::Empty("text-CVAE training set is empty".into()));
    }
    let model = TextCvae::new(cfg.clone())?;
    let mut opt = nn::adam(model.store.vars(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e47_cfae);
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let planned = (cfg.epochs * batches_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let anneal = KlAnneal::new(cfg.kl_weight_max, cfg.kl_anneal_fraction, planned);
    let mut steps = LossHistory::new(&["reconstruction", "kl", "total", "kl_weight"]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let step = steps.len();
            if step >= planned {
                break 'outer;
            }
            let batch: Vec<TextExample<'_>> = idx.iter().map(|&i| examples[i].clone()).collect();
            let (lines, z_s, eps, prior) = model.prepare_batch(&batch, &mut rng)?;
            let prior_ref = match cfg.prior_mode {
                PriorMode::Standard => None,
                PriorMode::SpecPosterior => Some((&prior.0, &prior.1)),
            };
            let lambda = anneal.weight(step);
            let t = model.loss_tensors(&lines, &z_s, &eps, prior_ref, lambda, Some(&mut rng))?;
            let CvaeLoss {
                reconstruction: rec,
                kl,
                total,
            } = t.values()?;
            nn::check_finite(step + 1, &[("reconstruction", rec), ("kl", kl), ("total", total)])?;
            nn::backward_step(&mut opt, &t.total)?;
            steps.push(&[rec, kl, total, lambda]);
        }
    }
    Ok(TextCvaeTraining { model, steps })
}

/// Trains on paired examples, obtaining each clip's audio posterior from `spec_vae`.
pub fn train(
    examples: &[crate::corpus::PairedExample],
    spec_vae: &SpecVae,
    cfg: TextCvaeConfig,
) -> Result<TextCvaeTraining> {
    if spec_vae.latent_dim() != cfg.latent_dim {
        return Err(Error::Config(format!(
            "text latent_dim {} differs from spec-VAE latent_dim {}",
            cfg.latent_dim,
            spec_vae.latent_dim()
        )));
    }
    let specs: Vec<&crate::audio::MelSpectrogram> =
        examples.iter().map(|e| e.spectrogram.as_ref()).collect();
    let posteriors = spec_vae.encode_all(&specs)?;
    let items: Vec<TextExample<'_>> = examples
        .iter()
        .zip(&posteriors)
        .map(|(e, p)| TextExample {
            line: &e.line,
            spec_posterior: p,
        })
        .collect();
    train_with_posteriors(&items, cfg)
}

/// Decodes ids into display text with `vocab`.
pub fn line_text(vocab: &Vocabulary, ids: &[u32]) -> String {
    vocab.decode(ids)
}
