//! Oracles, tiny models and stub pipelines shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use candle_core::{DType, Device, Tensor};
use futures::{SinkExt, StreamExt};
use lyricjam::audio::{AudioClip, MelSpectrogram, SpectrogramParams};
use lyricjam::corpus::{self, SyntheticConfig, SyntheticCorpus};
use lyricjam::gan::{GanConfig, GanModel};
use lyricjam::nn::{self, ParamStore};
use lyricjam::protocol::{ClientMessage, ServerMessage};
use lyricjam::ranker::RankedLine;
use lyricjam::service::{self, ClipPipeline, GenerationResult, Mode, Models, Scorer};
use lyricjam::spec_vae::{SpecVae, SpecVaeConfig};
use lyricjam::text_cvae::{PriorMode, TextCvae, TextCvaeConfig};
use lyricjam::Result;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

// ---- KL by quadrature ----

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `∫ q log(q/p)` for 1-D Gaussians by composite Simpson over `mean_q ± 14 sd_q`.
pub fn kl_quadrature_1d(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let (a, b) = (mq - 14.0 * sq, mq + 14.0 * sq);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = log_normal_pdf(x, mq, sq);
        lq.exp() * (lq - log_normal_pdf(x, mp, sp))
    };
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

// ---- finite differences ----

/// One parameter entry compared against a central difference.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
    /// dominating through rounding noise.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn set_entry(store: &ParamStore, name: &str, index: usize, value: f64) {
    let var = store.get(name).expect("parameter exists");
    let t = var.as_tensor();
    let mut flat = nn::flatten_f64(t).unwrap();
    flat[index] = value;
    let fresh = Tensor::from_vec(flat, t.shape(), &Device::Cpu).unwrap().to_dtype(t.dtype()).unwrap();
    var.set(&fresh).unwrap();
}

/// Central differences of `loss` on up to `per_tensor` evenly spaced entries of
/// every parameter tensor in `store`.
pub fn finite_differences(
    store: &ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    per_tensor: usize,
    h: f64,
    loss: impl Fn() -> f64,
) -> Vec<GradProbe> {
    let mut out = Vec::new();
    for (name, grad) in analytic {
        let values = nn::flatten_f64(store.get(name).unwrap().as_tensor()).unwrap();
        let step = (values.len() / per_tensor).max(1);
        for index in (0..values.len()).step_by(step).take(per_tensor) {
            let x = values[index];
            set_entry(store, name, index, x + h);
            let up = loss();
            set_entry(store, name, index, x - h);
            let down = loss();
            set_entry(store, name, index, x);
            out.push(GradProbe {
                name: name.clone(),
                index,
                analytic: grad[index],
                numeric: (up - down) / (2.0 * h),
            });
        }
    }
    out
}

pub fn tiny_spec_cfg() -> SpecVaeConfig {
    let mut params = SpectrogramParams::desk();
    params.mel_bands = 16;
    params.frame_pad_to = 16;
    SpecVaeConfig {
        latent_dim: 4,
        conv_channels: [2, 3, 3, 4],
        spectrogram: params,
        seed: 5,
        ..SpecVaeConfig::default()
    }
}

pub fn tiny_text_cfg(vocab: usize, prior: PriorMode) -> TextCvaeConfig {
    TextCvaeConfig {
        hidden_dim: 5,
        latent_dim: 3,
        embedding_dim: 4,
        seed: 9,
        ..TextCvaeConfig::new(vocab, prior)
    }
}

/// Deterministic smooth grid with values in [0, 1].
pub fn ramp(h: usize, w: usize, shift: f32) -> MelSpectrogram {
    let grid = (0..h * w)
        .map(|i| ((i as f32 * 0.37 + shift).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
        .collect();
    MelSpectrogram::from_grid(grid, h, w).unwrap()
}

/// Worst relative error of the spec-VAE loss gradient on a 16x16 f64 model.
pub fn spec_vae_gradient_check(per_tensor: usize) -> Vec<GradProbe> {
    let model = SpecVae::with_dtype(tiny_spec_cfg(), DType::F64).unwrap();
    let xs = [ramp(16, 16, 0.0), ramp(16, 16, 1.3)];
    let refs: Vec<&MelSpectrogram> = xs.iter().collect();
    let eps = vec![vec![0.3, -1.1, 0.5, 0.9], vec![-0.4, 0.2, 1.7, -0.6]];
    let (_, grads) = model.loss_gradients(&refs, &eps).unwrap();
    finite_differences(model.params(), &grads, per_tensor, 1e-6, || {
        model.loss_with_noise(&refs, &eps).unwrap().total
    })
}

/// Worst relative error of the text-CVAE loss gradient on a tiny f64 model.
pub fn text_cvae_gradient_check(prior: PriorMode, per_tensor: usize) -> Vec<GradProbe> {
    use lyricjam::corpus::LyricLine;
    use lyricjam::latent::DiagonalGaussian;
    use lyricjam::text_cvae::TextExample;
    let model = TextCvae::with_dtype(tiny_text_cfg(9, prior), DType::F64).unwrap();
    let lines = [
        LyricLine::new(vec![4, 5, 6], "").unwrap(),
        LyricLine::new(vec![7, 8], "").unwrap(),
        LyricLine::new(vec![5, 5, 7, 4], "").unwrap(),
    ];
    let posts = [
        DiagonalGaussian::new(vec![0.2, -0.5, 1.0], vec![0.7, 1.2, 0.4]).unwrap(),
        DiagonalGaussian::new(vec![-1.0, 0.1, 0.3], vec![0.5, 0.9, 1.1]).unwrap(),
        DiagonalGaussian::new(vec![0.0, 0.6, -0.2], vec![1.3, 0.6, 0.8]).unwrap(),
    ];
    let batch: Vec<TextExample<'_>> = lines
        .iter()
        .zip(&posts)
        .map(|(line, spec_posterior)| TextExample { line, spec_posterior })
        .collect();
    let (_, grads) = model.loss_gradients(&batch, 0.7, prior, 3).unwrap();
    finite_differences(model.params(), &grads, per_tensor, 1e-6, || {
        model.loss(&batch, 0.7, prior, 3).unwrap().total
    })
}

// ---- models ----

pub fn small_corpus(pairs: usize, seed: u64) -> SyntheticCorpus {
    corpus::make_synthetic_corpus(&SyntheticConfig::new(2, pairs, seed)).unwrap()
}

/// Freshly initialized desk-scale models over `corpus`'s vocabulary.
pub fn untrained_models(corpus: &SyntheticCorpus, latent: usize) -> Models {
    let spec_vae = SpecVae::new(SpecVaeConfig::desk(latent)).unwrap();
    let text = |prior, seed| {
        Arc::new(
            TextCvae::new(TextCvaeConfig {
                seed,
                ..TextCvaeConfig::desk(corpus.vocab.len(), latent, prior)
            })
            .unwrap(),
        )
    };
    Models {
        spec_vae,
        text_standard: Some(text(PriorMode::Standard, 1)),
        text_spec: Some(text(PriorMode::SpecPosterior, 2)),
        gan: Some(GanModel::new(GanConfig::new(latent)).unwrap()),
        vocab: corpus.vocab.clone(),
        scorer: Scorer::Likelihood,
    }
}

// ---- stub pipelines ----

/// Answers every clip with one line describing it, after an optional delay.
pub struct StubPipeline {
    pub delay: Duration,
    pub calls: AtomicUsize,
}

impl StubPipeline {
    pub fn new(delay: Duration) -> Self {
        Self {
            delay,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ClipPipeline for StubPipeline {
    fn check_mode(&self, _: Mode) -> Result<()> {
        Ok(())
    }

    fn run(&self, clip: &AudioClip, mode: Mode, seed: u64, clip_id: &str) -> Result<GenerationResult> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        let energy: i64 = clip.samples().iter().map(|&s| s as i64).sum();
        Ok(GenerationResult {
            clip_id: clip_id.to_string(),
            timestamp: service::now_millis(),
            lines: vec![RankedLine {
                text: format!("{} frames sum {energy} seed {seed}", clip.frames()),
                score: -1.0,
                rank: 1,
            }],
            mode,
            latency_ms: self.delay.as_secs_f64() * 1e3,
        })
    }
}

// ---- scripted WebSocket client ----

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub async fn connect(addr: std::net::SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap().0
}

pub async fn send(ws: &mut Ws, msg: &ClientMessage) {
    ws.send(Message::Text(serde_json::to_string(msg).unwrap())).await.unwrap();
}

pub async fn send_raw(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.to_string())).await.unwrap();
}

/// Next text frame as raw JSON, or `None` on close or after `timeout`.
pub async fn next_text(ws: &mut Ws, timeout: Duration) -> Option<String> {
    loop {
        match tokio::time::timeout(timeout, ws.next()).await {
            Ok(Some(Ok(Message::Text(t)))) => return Some(t),
            Ok(Some(Ok(Message::Close(_)))) | Ok(None) | Err(_) => return None,
            Ok(Some(Ok(_))) => continue,
            Ok(Some(Err(_))) => return None,
        }
    }
}

pub async fn next_message(ws: &mut Ws, timeout: Duration) -> Option<(String, ServerMessage)> {
    let raw = next_text(ws, timeout).await?;
    let msg = serde_json::from_str(&raw).unwrap();
    Some((raw, msg))
}

/// Sine PCM at `rate`, `seconds` long, as interleaved 16-bit samples.
pub fn sine_pcm(freq: f64, rate: u32, channels: u16, seconds: f64) -> Vec<i16> {
    let frames = (rate as f64 * seconds).round() as usize;
    let mut out = Vec::with_capacity(frames * channels as usize);
    for i in 0..frames {
        let v = (0.25 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() * 32767.0) as i16;
        for _ in 0..channels {
            out.push(v);
        }
    }
    out
}
