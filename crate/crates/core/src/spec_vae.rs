//! Convolutional VAE over mel-spectrograms.
//!
//! Encoder: four stride-2 convolutions with ReLU, then linear mean and
//! log-stddev heads. Decoder: a linear projection back to the smallest feature
//! map, then four transposed convolutions (ReLU between, sigmoid at the end).

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Module;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, SpectrogramParams};
use crate::error::{Error, Result};
use crate::latent::{self, DiagonalGaussian};
use crate::nn::{self, CheckpointPaths, LossHistory, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecVaeConfig {
    pub latent_dim: usize,
    pub conv_channels: [usize; 4],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub kl_weight: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Spectrogram settings the model was trained on; fixes the input shape.
    pub spectrogram: SpectrogramParams,
}

impl Default for SpecVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            conv_channels: [32, 64, 128, 256],
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 50,
            max_steps: None,
            kl_weight: 1.0,
            temperature: 1.0,
            seed: 0,
            spectrogram: SpectrogramParams::default(),
        }
    }
}

impl SpecVaeConfig {
    /// Small model over the 32 x 160 desk spectrograms.
    pub fn desk(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            conv_channels: [8, 16, 32, 64],
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            spectrogram: SpectrogramParams::desk(),
            ..Self::default()
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.spectrogram.shape()
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let (h, w) = self.input_shape();
        (self.conv_channels[3], h / 16, w / 16)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        let (h, w) = self.input_shape();
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "spectrogram shape {h}x{w} must be a positive multiple of 16 in both axes"
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config("batch size and channel counts must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config("kl_weight and temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub(crate) struct VaeLossTensors {
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

impl VaeLossTensors {
    fn values(&self) -> Result<VaeLoss> {
        Ok(VaeLoss {
            reconstruction: nn::scalar_f64(&self.reconstruction)?,
            kl: nn::scalar_f64(&self.kl)?,
            total: nn::scalar_f64(&self.total)?,
        })
    }
}

pub struct SpecVae {
    cfg: SpecVaeConfig,
    store: ParamStore,
    encoder: Vec<candle_nn::Conv2d>,
    mean_head: candle_nn::Linear,
    log_std_head: candle_nn::Linear,
    project: candle_nn::Linear,
    decoder: Vec<candle_nn::ConvTranspose2d>,
}

impl SpecVae {
    pub fn new(cfg: SpecVaeConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: SpecVaeConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let ch = cfg.conv_channels;
        let ins = [1, ch[0], ch[1], ch[2]];
        let encoder = (0..4)
            .map(|i| nn::down_conv(&mut store, &format!("enc.conv{i}"), ins[i], ch[i]))
            .collect::<Result<Vec<_>>>()?;
        let (c, h, w) = cfg.bottleneck();
        let flat = c * h * w;
        let mean_head = nn::linear(&mut store, "enc.mean", flat, cfg.latent_dim)?;
        let log_std_head = nn::linear(&mut store, "enc.log_std", flat, cfg.latent_dim)?;
        let project = nn::linear(&mut store, "dec.project", cfg.latent_dim, flat)?;
        let outs = [ch[2], ch[1], ch[0], 1];
        let decoder = (0..4)
            .map(|i| nn::up_conv(&mut store, &format!("dec.deconv{i}"), ch[3 - i], outs[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            encoder,
            mean_head,
            log_std_head,
            project,
            decoder,
        })
    }

    pub fn config(&self) -> &SpecVaeConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Packs spectrograms into a `(batch, 1, bands, frames)` tensor.
    pub fn batch_tensor(&self, xs: &[&MelSpectrogram]) -> Result<Tensor> {
        let (h, w) = self.cfg.input_shape();
        let mut flat = Vec::with_capacity(xs.len() * h * w);
        for x in xs {
            if x.shape() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    actual: vec![x.bands(), x.frames()],
                });
            }
            flat.extend_from_slice(x.grid());
        }
        Ok(Tensor::from_vec(flat, (xs.len(), 1, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub(crate) fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.encoder {
            h = conv.forward(&h)?.relu()?;
        }
        let h = h.flatten_from(1)?;
        Ok((self.mean_head.forward(&h)?, self.log_std_head.forward(&h)?))
    }

    pub(crate) fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.cfg.bottleneck();
        let batch = z.dim(0)?;
        let mut x = self.project.forward(z)?.reshape((batch, c, h, w))?;
        let last = self.decoder.len() - 1;
        for (i, deconv) in self.decoder.iter().enumerate() {
            x = deconv.forward(&x)?;
            x = if i < last {
                x.relu()?
            } else {
                candle_nn::ops::sigmoid(&x)?
            };
        }
        Ok(x)
    }

    pub fn encode(&self, x: &MelSpectrogram) -> Result<DiagonalGaussian> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[&MelSpectrogram]) -> Result<Vec<DiagonalGaussian>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let (mean, log_std) = self.encode_tensor(&self.batch_tensor(xs)?)?;
        nn::gaussians_from_rows(&mean, &log_std)
    }

    /// Encodes in chunks of `batch_size` to bound memory.
    pub fn encode_all(&self, xs: &[&MelSpectrogram]) -> Result<Vec<DiagonalGaussian>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(self.cfg.batch_size.max(1)) {
            out.extend(self.encode_batch(chunk)?);
        }
        Ok(out)
    }

    pub fn decode(&self, z: &[f64]) -> Result<MelSpectrogram> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.latent_dim,
                actual: z.len(),
            });
        }
        let zt = nn::matrix(&[z.to_vec()], self.dtype())?;
        let out = self.decode_tensor(&zt)?;
        let (h, w) = self.cfg.input_shape();
        let grid: Vec<f32> = nn::flatten_f64(&out)?.into_iter().map(|v| v as f32).collect();
        MelSpectrogram::from_grid(grid, h, w)
    }

    /// Batch loss for spectrogram tensor `x` and standard-normal noise `eps`
    /// of shape `(batch, latent_dim)`.
    pub(crate) fn loss_tensors(&self, x: &Tensor, eps: &Tensor) -> Result<VaeLossTensors> {
        let (mean, log_std) = self.encode_tensor(x)?;
        let z = (&mean + ((eps * log_std.exp()?)? * self.cfg.temperature)?)?;
        let recon = self.decode_tensor(&z)?;
        let reconstruction = (recon - x)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?.mean_all()?;
        let kl = nn::kl_standard_rows(&mean, &log_std)?.mean_all()?;
        let total = (&reconstruction + (&kl * self.cfg.kl_weight)?)?;
        Ok(VaeLossTensors {
            reconstruction,
            kl,
            total,
        })
    }

    /// Loss of a batch with explicit noise (one row of `latent_dim` normals per item).
    pub fn loss_with_noise(&self, xs: &[&MelSpectrogram], eps: &[Vec<f64>]) -> Result<VaeLoss> {
        let (x, eps) = self.noisy_batch(xs, eps)?;
        self.loss_tensors(&x, &eps)?.values()
    }

    fn noisy_batch(&self, xs: &[&MelSpectrogram], eps: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        if eps.len() != xs.len() || eps.iter().any(|e| e.len() != self.cfg.latent_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.latent_dim,
                actual: eps.first().map_or(0, Vec::len),
            });
        }
        Ok((self.batch_tensor(xs)?, nn::matrix(eps, self.dtype())?))
    }

    /// Loss and its gradient with respect to every parameter, for explicit noise.
    pub fn loss_gradients(
        &self,
        xs: &[&MelSpectrogram],
        eps: &[Vec<f64>],
    ) -> Result<(VaeLoss, BTreeMap<String, Vec<f64>>)> {
        let (x, eps) = self.noisy_batch(xs, eps)?;
        let t = self.loss_tensors(&x, &eps)?;
        Ok((t.values()?, nn::gradients(&self.store, &t.total)?))
    }

    /// Loss of a batch with noise drawn from `seed`.
    pub fn loss(&self, xs: &[&MelSpectrogram], seed: u64) -> Result<VaeLoss> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<Vec<f64>> = xs
            .iter()
            .map(|_| latent::standard_normal_vec(self.cfg.latent_dim, &mut rng))
            .collect();
        self.loss_with_noise(xs, &eps)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        CheckpointPaths::new(dir, "spec_vae").write(&self.store, &self.cfg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let paths = CheckpointPaths::new(dir, "spec_vae");
        let cfg: SpecVaeConfig = paths.read_config()?;
        let mut model = Self::new(cfg)?;
        model.store.load(&paths.weights)?;
        Ok(model)
    }
}

/// Result of a training run: the model plus per-step and per-epoch losses.
pub struct SpecVaeTraining {
    pub model: SpecVae,
    /// Columns: reconstruction, kl, total (one row per optimizer step).
    pub steps: LossHistory,
    /// Mean losses of each completed epoch.
    pub epochs: LossHistory,
}

/// Trains from scratch on `data` with Adam.
pub fn train(data: &[&MelSpectrogram], cfg: SpecVaeConfig) -> Result<SpecVaeTraining> {
    if data.is_empty() {
        return Err(Error::Empty("spec-VAE training set is empty".into()));
    }
    let model = SpecVae::new(cfg)?;
    train_model(model, data)
}

/// Continues training an existing model.
pub fn train_model(model: SpecVae, data: &[&MelSpectrogram]) -> Result<SpecVaeTraining> {
    if data.is_empty() {
        return Err(Error::Empty("spec-VAE training set is empty".into()));
    }
    let cfg = model.cfg.clone();
    let mut opt = nn::adam(model.store.vars(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5bec);
    let mut steps = LossHistory::new(&["reconstruction", "kl", "total"]);
    let mut epochs = LossHistory::new(&["reconstruction", "kl", "total"]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if steps.len() >= max_steps {
                break 'outer;
            }
            let batch: Vec<&MelSpectrogram> = idx.iter().map(|&i| data[i]).collect();
            let x = model.batch_tensor(&batch)?;
            let eps: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| latent::standard_normal_vec(cfg.latent_dim, &mut rng))
                .collect();
            let eps = nn::matrix(&eps, model.dtype())?;
            let losses = model.loss_tensors(&x, &eps)?;
            let v = losses.values()?;
            nn::check_finite(
                steps.len() + 1,
                &[("reconstruction", v.reconstruction), ("kl", v.kl), ("total", v.total)],
            )?;
            nn::backward_step(&mut opt, &losses.total)?;
            steps.push(&[v.reconstruction, v.kl, v.total]);
            sums[0] += v.reconstruction;
            sums[1] += v.kl;
            sums[2] += v.total;
            batches += 1;
        }
        if batches > 0 {
            let n = batches as f64;
            epochs.push(&[sums[0] / n, sums[1] / n, sums[2] / n]);
        }
    }
    Ok(SpecVaeTraining {
        model,
        steps,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SpecVaeConfig {
        let mut params = SpectrogramParams::desk();
        params.mel_bands = 16;
        params.frame_pad_to = 16;
        SpecVaeConfig {
            latent_dim: 4,
            conv_channels: [2, 2, 2, 2],
            spectrogram: params,
            ..SpecVaeConfig::default()
        }
    }

    fn ramp(h: usize, w: usize, shift: f32) -> MelSpectrogram {
        let grid = (0..h * w)
            .map(|i| ((i as f32 * 0.37 + shift).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
            .collect();
        MelSpectrogram::from_grid(grid, h, w).unwrap()
    }

    #[test]
    fn rejects_shapes_not_divisible_by_16() {
        let mut cfg = tiny_cfg();
        cfg.spectrogram.mel_bands = 8;
        assert!(SpecVae::new(cfg).is_err());
    }

    #[test]
    fn encode_decode_shapes_and_ranges() {
        let model = SpecVae::new(tiny_cfg()).unwrap();
        let x = ramp(16, 16, 0.0);
        let g = model.encode(&x).unwrap();
        assert_eq!(g.dim(), 4);
        assert!(g.stddev().iter().all(|&s| s > 0.0));
        assert_eq!(g, model.encode(&x).unwrap());
        let y = model.decode(&[3.0, -7.0, 0.5, 100.0]).unwrap();
        assert_eq!(y.shape(), (16, 16));
        assert!(y.grid().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, model.decode(&[3.0, -7.0, 0.5, 100.0]).unwrap());
        assert!(model.decode(&[0.0; 3]).is_err());
        assert!(model.encode(&ramp(32, 16, 0.0)).is_err());
    }

    #[test]
    fn zero_kl_weight_leaves_reconstruction() {
        let mut cfg = tiny_cfg();
        cfg.kl_weight = 0.0;
        let model = SpecVae::new(cfg).unwrap();
        let x = ramp(16, 16, 1.0);
        let l = model.loss(&[&x], 4).unwrap();
        assert!(l.kl > 0.0);
        assert_eq!(l.total, l.reconstruction);
        assert!(l.reconstruction >= 0.0);
    }

    #[test]
    fn reconstruction_is_squared_error_of_decoded_mean() {
        let mut cfg = tiny_cfg();
        cfg.temperature = 0.0;
        let model = SpecVae::new(cfg).unwrap();
        let x = ramp(16, 16, 2.0);
        let decoded = model.decode(model.encode(&x).unwrap().mean()).unwrap();
        let sq: f64 = decoded
            .grid()
            .iter()
            .zip(x.grid())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let l = model.loss(&[&x], 0).unwrap();
        assert!((l.reconstruction - sq).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_restores_posteriors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let data = [ramp(16, 16, 0.0), ramp(16, 16, 1.0)];
        let refs: Vec<&MelSpectrogram> = data.iter().collect();
        let trained = train(&refs, cfg).unwrap();
        trained.model.save(dir.path()).unwrap();
        let loaded = SpecVae::load(dir.path()).unwrap();
        assert_eq!(trained.model.encode(&data[0]).unwrap(), loaded.encode(&data[0]).unwrap());
        assert_eq!(trained.steps.len(), 2);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(train(&[], tiny_cfg()), Err(Error::Empty(_))));
    }
}
