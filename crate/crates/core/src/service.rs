//! Per-clip generation, sessions and their persisted history.
//!
//! The async network front end lives in [`crate::server`]; everything here is
//! synchronous so it can be driven directly from tests and tools.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, MelSpectrogram, Segmenter, SpectrogramParams};
use crate::corpus::{LyricLine, Vocabulary};
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::latent::{self, DiagonalGaussian};
use crate::protocol::ServerMessage;
use crate::ranker::{self, ClassifierRanker, LikelihoodRanker, LineScorer, RankedLine, RankerKind, RankerSpec, TopSampling};
use crate::spec_vae::SpecVae;
use crate::text_cvae::{DecodeStrategy, TextCvae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Gan,
    Topology,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Gan, Mode::Topology];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Gan => "gan",
            Mode::Topology => "topology",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "gan" => Ok(Mode::Gan),
            "topology" => Ok(Mode::Topology),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// File names inside a model directory.
pub mod layout {
    pub const TEXT_STANDARD: &str = "text_cvae_standard";
    pub const TEXT_SPEC: &str = "text_cvae_spec";
    pub const VOCAB: &str = "vocab.json";
}

pub enum Scorer {
    Likelihood,
    Classifier(ClassifierRanker),
}

/// Trained models shared read-only by every session.
pub struct Models {
    pub spec_vae: SpecVae,
    /// Text model trained with the standard normal prior (baseline and GAN modes).
    pub text_standard: Option<Arc<TextCvae>>,
    /// Text model trained with audio posteriors as priors (topology mode).
    pub text_spec: Option<Arc<TextCvae>>,
    pub gan: Option<GanModel>,
    pub vocab: Vocabulary,
    pub scorer: Scorer,
}

impl Models {
    /// Loads whatever checkpoints exist in `dir`; the spec-VAE and vocabulary are required.
    pub fn load(dir: &Path, ranker: &RankerSpec) -> Result<Self> {
        ranker.validate()?;
        let spec_vae = SpecVae::load(dir)?;
        let vocab = Vocabulary::load(&dir.join(layout::VOCAB))?;
        let text = |stem: &str| -> Result<Option<Arc<TextCvae>>> {
            if crate::nn::CheckpointPaths::new(dir, stem).exists() {
                Ok(Some(Arc::new(TextCvae::load(dir, stem)?)))
            } else {
                Ok(None)
            }
        };
        let gan = if crate::nn::CheckpointPaths::new(dir, "gan_generator").exists() {
            Some(GanModel::load(dir)?)
        } else {
            None
        };
        let scorer = match ranker.kind {
            RankerKind::Likelihood => Scorer::Likelihood,
            RankerKind::Classifier => Scorer::Classifier(ClassifierRanker::load(
                ranker.checkpoint.as_deref().expect("validated"),
            )?),
        };
        Ok(Self {
            spec_vae,
            text_standard: text(layout::TEXT_STANDARD)?,
            text_spec: text(layout::TEXT_SPEC)?,
            gan,
            vocab,
            scorer,
        })
    }

    pub fn spectrogram_params(&self) -> &SpectrogramParams {
        &self.spec_vae.config().spectrogram
    }

    /// The text model used by `mode`, or a configuration error when a required checkpoint is absent.
    pub fn text_model(&self, mode: Mode) -> Result<&Arc<TextCvae>> {
        let (model, what) = match mode {
            Mode::Baseline | Mode::Gan => (&self.text_standard, "standard-prior text model"),
            Mode::Topology => (&self.text_spec, "spec-prior text model"),
        };
        let model = model
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {mode} needs a {what}")))?;
        if model.latent_dim() != self.spec_vae.latent_dim() {
            return Err(Error::Config(format!("{what} latent size differs from the spec-VAE")));
        }
        Ok(model)
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        self.text_model(mode)?;
        if mode == Mode::Gan && self.gan.is_none() {
            return Err(Error::Config("mode gan needs a GAN checkpoint".into()));
        }
        Ok(())
    }

    pub fn available_modes(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|m| self.check_mode(*m).is_ok()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Candidates decoded per clip.
    pub n: usize,
    /// Lines kept after ranking.
    pub k: usize,
    /// Temperature for drawing latents from posteriors.
    pub latent_temperature: f64,
    /// 0 decodes greedily; otherwise tokens are sampled at this temperature.
    pub decode_temperature: f64,
    /// When set, `k` lines are drawn uniformly from the best `m`.
    pub top_m: Option<usize>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            n: 100,
            k: 2,
            latent_temperature: 1.0,
            decode_temperature: 0.0,
            top_m: None,
        }
    }
}

impl GenerationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n < self.k {
            return Err(Error::Config(format!(
                "need 1 <= k <= n, got k={} n={}",
                self.k, self.n
            )));
        }
        if !(self.latent_temperature >= 0.0) || !(self.decode_temperature >= 0.0) {
            return Err(Error::Config("temperatures must be non-negative".into()));
        }
        if matches!(self.top_m, Some(m) if m < self.k) {
            return Err(Error::Config("top_m must be at least k".into()));
        }
        Ok(())
    }
}

/// Unranked candidates with the latents they were decoded from.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub spec_posterior: DiagonalGaussian,
    pub z_s: Vec<Vec<f64>>,
    pub z_t: Vec<Vec<f64>>,
    pub lines: Vec<LyricLine>,
    pub texts: Vec<String>,
}

/// Decodes `opts.n` candidate lines for one spectrogram.
///
/// Random draws, all from one ChaCha8 stream seeded with `seed`, happen in
/// this order: for each candidate, `z_s` from the audio posterior, then `z_t`
/// (baseline mode, and topology mode unless the text model reuses `z_s`);
/// after all candidates, one `u64` decode seed when sampling tokens, then one
/// `u64` when sampling from the top `m`.
pub fn generate_candidates(
    models: &Models,
    spectrogram: &MelSpectrogram,
    mode: Mode,
    opts: &GenerationOptions,
    seed: u64,
) -> Result<(Candidates, ChaCha8Rng)> {
    opts.validate()?;
    models.check_mode(mode)?;
    let text = models.text_model(mode)?;
    let q_s = models.spec_vae.encode(spectrogram)?;
    let d = q_s.dim();
    let tau = opts.latent_temperature;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z_s = Vec::with_capacity(opts.n);
    let mut z_t = Vec::with_capacity(opts.n);
    let reuse = text.config().reuse_spec_sample;
    for _ in 0..opts.n {
        let s = latent::sample(&q_s, tau, &mut rng);
        match mode {
            Mode::Baseline => z_t.push(latent::standard_normal_vec(d, &mut rng)),
            Mode::Topology if reuse => z_t.push(s.clone()),
            Mode::Topology => z_t.push(latent::sample(&q_s, tau, &mut rng)),
            Mode::Gan => {}
        }
        z_s.push(s);
    }
    if mode == Mode::Gan {
        z_t = models.gan.as_ref().expect("checked").predict_batch(&z_s)?;
    }
    let strategy = if opts.decode_temperature > 0.0 {
        DecodeStrategy::Sample {
            temperature: opts.decode_temperature,
            seed: rng.next_u64(),
        }
    } else {
        DecodeStrategy::Greedy
    };
    let ids = text.decode_batch(&z_t, &z_s, strategy)?;
    let lines = ids
        .into_iter()
        .map(|ids| LyricLine::from_ids(&models.vocab, ids))
        .collect::<Result<Vec<_>>>()?;
    let texts = lines.iter().map(|l| l.source_text().to_string()).collect();
    Ok((
        Candidates {
            spec_posterior: q_s,
            z_s,
            z_t,
            lines,
            texts,
        },
        rng,
    ))
}

/// The context latents a likelihood ranker conditions on for one clip:
/// the mode's central text latent and the audio posterior mean.
pub fn ranking_context(models: &Models, mode: Mode, q_s: &DiagonalGaussian) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu = q_s.mean().to_vec();
    let z_t = match mode {
        Mode::Baseline => vec![0.0; mu.len()],
        Mode::Topology => mu.clone(),
        Mode::Gan => models
            .gan
            .as_ref()
            .ok_or_else(|| Error::Config("mode gan needs a GAN checkpoint".into()))?
            .predict_text_latent(&mu)?,
    };
    Ok((z_t, mu))
}

pub fn score_candidates(models: &Models, mode: Mode, c: &Candidates) -> Result<Vec<f64>> {
    match &models.scorer {
        Scorer::Likelihood => {
            let (z_t, z_s) = ranking_context(models, mode, &c.spec_posterior)?;
            LikelihoodRanker::new(models.text_model(mode)?.clone(), z_t, z_s)?
                .score_lines(&c.lines, &models.vocab)
        }
        Scorer::Classifier(clf) => clf.score_lines(&c.lines, &models.vocab),
    }
}

/// Candidates, scores and the `k` selected lines.
pub fn generate_lines(
    models: &Models,
    spectrogram: &MelSpectrogram,
    mode: Mode,
    opts: &GenerationOptions,
    seed: u64,
) -> Result<Vec<RankedLine>> {
    let (candidates, mut rng) = generate_candidates(models, spectrogram, mode, opts, seed)?;
    let scores = score_candidates(models, mode, &candidates)?;
    let sampling = opts.top_m.map(|m| TopSampling {
        m,
        seed: rng.next_u64(),
    });
    ranker::select(&candidates.texts, &scores, opts.k, sampling)
}

/// Output of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub clip_id: String,
    #[serde(with = "iso_millis")]
    pub timestamp: DateTime<Utc>,
    pub lines: Vec<RankedLine>,
    pub mode: Mode,
    pub latency_ms: f64,
}

mod iso_millis {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Current time at millisecond precision, so it survives a round trip through the log.
pub fn now_millis() -> DateTime<Utc> {
    let now = Utc::now();
    DateTime::parse_from_rfc3339(&now.to_rfc3339_opts(SecondsFormat::Millis, true))
        .expect("own format")
        .with_timezone(&Utc)
}

/// Runs the whole pipeline on one spectrogram. `latency_ms` covers this call only.
pub fn generate_for_clip(
    models: &Models,
    spectrogram: &MelSpectrogram,
    mode: Mode,
    opts: &GenerationOptions,
    seed: u64,
    clip_id: &str,
) -> Result<GenerationResult> {
    let start = Instant::now();
    let lines = generate_lines(models, spectrogram, mode, opts, seed)?;
    Ok(GenerationResult {
        clip_id: clip_id.to_string(),
        timestamp: now_millis(),
        lines,
        mode,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Something that turns an audio window into a result; the server is generic
/// over it so tests can substitute a stub.
pub trait ClipPipeline: Send + Sync + 'static {
    fn check_mode(&self, mode: Mode) -> Result<()>;
    fn run(&self, clip: &AudioClip, mode: Mode, seed: u64, clip_id: &str) -> Result<GenerationResult>;
}

/// The model-backed pipeline: spectrogram, latents, decoding, ranking.
pub struct ModelPipeline {
    pub models: Arc<Models>,
    pub options: GenerationOptions,
}

impl ModelPipeline {
    pub fn new(models: Arc<Models>, options: GenerationOptions) -> Result<Self> {
        options.validate()?;
        Ok(Self { models, options })
    }
}

impl ClipPipeline for ModelPipeline {
    fn check_mode(&self, mode: Mode) -> Result<()> {
        self.models.check_mode(mode)
    }

    fn run(&self, clip: &AudioClip, mode: Mode, seed: u64, clip_id: &str) -> Result<GenerationResult> {
        let start = Instant::now();
        let spec = audio::to_mel_spectrogram(clip, self.models.spectrogram_params())?;
        let mut result = generate_for_clip(&self.models, &spec, mode, &self.options, seed, clip_id)?;
        result.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(result)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Session seed from the server seed and the session id (FNV-1a of the id).
pub fn session_seed(server_seed: u64, session_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in session_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(server_seed ^ h)
}

/// Seed of clip `index` within a session.
pub fn clip_seed(session_seed: u64, index: u64) -> u64 {
    splitmix64(session_seed ^ splitmix64(index))
}

pub fn clip_id(session_id: &str, index: u64) -> String {
    format!("{session_id}-{index:05}")
}

/// Session ids double as file names, so they are restricted to `[A-Za-z0-9_-]{1,64}`.
pub fn validate_session_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(Error::Session(format!("invalid session id {id:?}")))
    }
}

/// Directory of per-session append-only history logs.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(data_dir: &Path) -> Result<Self> {
        let dir = data_dir.join("sessions");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn log_path(&self, id: &str) -> Result<PathBuf> {
        validate_session_id(id)?;
        Ok(self.dir.join(format!("{id}.jsonl")))
    }

    pub fn exists(&self, id: &str) -> Result<bool> {
        Ok(self.log_path(id)?.exists())
    }

    /// Creates the log of a new session; fails if the id was used before.
    pub fn create(&self, id: &str) -> Result<HistoryLog> {
        let path = self.log_path(id)?;
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Session(format!("session {id} already exists")),
                _ => Error::Io(e),
            })?;
        Ok(HistoryLog {
            path,
            file: Mutex::new(file),
        })
    }

    /// Raw log lines of a session.
    pub fn raw_history(&self, id: &str) -> Result<Vec<String>> {
        let path = self.log_path(id)?;
        if !path.exists() {
            return Err(Error::NotFound(format!("session {id}")));
        }
        Ok(std::fs::read_to_string(path)?.lines().map(str::to_string).collect())
    }

    /// Complete, time-ordered history of a session.
    pub fn session_history(&self, id: &str) -> Result<Vec<GenerationResult>> {
        self.raw_history(id)?
            .iter()
            .map(|line| match serde_json::from_str::<ServerMessage>(line)? {
                ServerMessage::Lines(r) => Ok(r),
                ServerMessage::Error { .. } => Err(Error::Protocol("error record in history log".into())),
            })
            .collect()
    }
}

/// Append-only JSON-lines log. Each record is the exact `lines` message sent to clients.
pub struct HistoryLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl HistoryLog {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes and syncs the record, returning the serialized message.
    pub fn append(&self, result: &GenerationResult) -> Result<String> {
        let text = serde_json::to_string(&ServerMessage::Lines(result.clone()))?;
        let mut file = self.file.lock().expect("log lock");
        file.write_all(text.as_bytes())?;
        file.write_all(b"\n")?;
        file.sync_data()?;
        Ok(text)
    }
}

/// Session state shared by the synchronous and networked paths, minus audio buffering.
pub struct SessionCore {
    pub id: String,
    pub mode: Mode,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    history: Vec<GenerationResult>,
    log: HistoryLog,
}

impl SessionCore {
    pub fn open(store: &SessionStore, id: &str, mode: Mode, server_seed: u64) -> Result<Self> {
        let log = store.create(id)?;
        Ok(Self {
            id: id.to_string(),
            mode,
            created_at: Utc::now(),
            seed: session_seed(server_seed, id),
            history: Vec::new(),
            log,
        })
    }

    pub fn history(&self) -> &[GenerationResult] {
        &self.history
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    /// Runs window `index` and persists the result; returns it with its wire form.
    pub fn process(
        &mut self,
        pipeline: &dyn ClipPipeline,
        clip: &AudioClip,
        index: u64,
    ) -> Result<(GenerationResult, String)> {
        let id = clip_id(&self.id, index);
        let mut result = pipeline.run(clip, self.mode, clip_seed(self.seed, index), &id)?;
        // Keep the history's timestamps non-decreasing even if the wall clock steps back.
        if let Some(last) = self.history.last() {
            if result.timestamp < last.timestamp {
                result.timestamp = last.timestamp;
            }
        }
        let wire = self.log.append(&result)?;
        self.history.push(result.clone());
        Ok((result, wire))
    }
}

/// A session driven synchronously: raw PCM in, results out.
pub struct Session {
    pub core: SessionCore,
    segmenter: Segmenter,
    next_index: u64,
}

pub const WINDOW_SECONDS: f64 = 10.0;

impl Session {
    pub fn open(
        store: &SessionStore,
        id: &str,
        mode: Mode,
        sample_rate: u32,
        channels: u16,
        server_seed: u64,
    ) -> Result<Self> {
        let segmenter = Segmenter::new(sample_rate, channels, WINDOW_SECONDS)?;
        Ok(Self {
            core: SessionCore::open(store, id, mode, server_seed)?,
            segmenter,
            next_index: 0,
        })
    }

    pub fn history(&self) -> &[GenerationResult] {
        self.core.history()
    }

    fn run_windows(&mut self, pipeline: &dyn ClipPipeline, clips: Vec<AudioClip>) -> Vec<Result<GenerationResult>> {
        clips
            .into_iter()
            .map(|clip| {
                let index = self.next_index;
                self.next_index += 1;
                let out = self.core.process(pipeline, &clip, index).map(|(r, _)| r);
                if let Err(e) = &out {
                    tracing::error!(session = %self.core.id, index, "generation failed: {e}");
                }
                out
            })
            .collect()
    }

    /// Buffers little-endian PCM; each completed window yields one outcome in order.
    /// A malformed chunk is an error and leaves the session untouched.
    pub fn handle_audio_chunk(
        &mut self,
        pipeline: &dyn ClipPipeline,
        bytes: &[u8],
    ) -> Result<Vec<Result<GenerationResult>>> {
        let samples = audio::pcm_from_le_bytes(bytes)?;
        let clips = self.segmenter.push_interleaved(&samples)?;
        Ok(self.run_windows(pipeline, clips))
    }

    /// Pads and processes the partial window, if any.
    pub fn flush(&mut self, pipeline: &dyn ClipPipeline) -> Vec<Result<GenerationResult>> {
        let clips: Vec<AudioClip> = self.segmenter.flush().into_iter().collect();
        self.run_windows(pipeline, clips)
    }
}

/// Regenerates a persisted clip from the session seed and clip index.
pub fn replay_clip(
    pipeline: &dyn ClipPipeline,
    session_seed: u64,
    session_id: &str,
    index: u64,
    mode: Mode,
    clip: &AudioClip,
) -> Result<GenerationResult> {
    pipeline.run(clip, mode, clip_seed(session_seed, index), &clip_id(session_id, index))
}
