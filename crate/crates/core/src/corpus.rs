//! Paired (spectrogram, lyric line) training data: vocabulary, manifest loading,
//! train/validation splitting and a synthetic clustered corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, MelSpectrogram, SpectrogramParams};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Longest lyric line in tokens; longer lines are truncated.
pub const MAX_LINE_LEN: usize = 20;

/// Lowercased word tokens; each punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn is_punctuation(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if !c.is_alphanumeric() && c != '\'')
}

/// Token/id bijection with `<pad>`, `<bos>`, `<eos>`, `<unk>` at ids 0-3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_full_list(tokens)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(Error::Config("vocabulary needs at least one word".into()));
        }
        if tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("reserved tokens must occupy ids 0-3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Words only, in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[4..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with spaces, attaching punctuation to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(RESERVED[UNK as usize]);
            if !out.is_empty() && !is_punctuation(tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_full_list(raw.tokens)
    }
}

/// Builds a vocabulary from raw lines; words seen fewer than `min_count` times are left out
/// and later encode to `<unk>`. Ids are assigned by descending frequency, ties alphabetical.
pub fn build_vocab<I, S>(lines: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_lines = 0;
    for line in lines {
        n_lines += 1;
        for tok in tokenize(line.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if n_lines == 0 || counts.is_empty() {
        return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if kept.is_empty() {
        return Err(Error::Empty(format!("no token occurs {min_count} times")));
    }
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// A tokenized lyric line, without `<bos>`/`<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricLine {
    tokens: Vec<u32>,
    source_text: String,
}

impl LyricLine {
    pub fn new(tokens: Vec<u32>, source_text: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("lyric line has no tokens".into()));
        }
        if tokens.len() > MAX_LINE_LEN {
            return Err(Error::Config(format!(
                "lyric line has {} tokens, limit is {MAX_LINE_LEN}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|&t| t == PAD || t == BOS || t == EOS) {
            return Err(Error::Config("lyric line contains a control token".into()));
        }
        Ok(Self {
            tokens,
            source_text: source_text.into(),
        })
    }

    /// Tokenizes `text`, truncating to [`MAX_LINE_LEN`].
    pub fn from_text(vocab: &Vocabulary, text: &str) -> Result<Self> {
        let mut ids = vocab.encode(text);
        ids.truncate(MAX_LINE_LEN);
        Self::new(ids, text)
    }

    /// A generated line: its source text is the detokenized form.
    pub fn from_ids(vocab: &Vocabulary, ids: Vec<u32>) -> Result<Self> {
        let text = vocab.decode(&ids);
        Self::new(ids, text)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }
}

#[derive(Debug, Clone)]
pub struct PairedExample {
    pub clip_id: String,
    pub spectrogram: Arc<MelSpectrogram>,
    pub line: LyricLine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// 1-based line number in the manifest file.
    pub line: usize,
    /// The audio path exactly as written in the manifest.
    pub clip_id: String,
    pub wav_path: PathBuf,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Records whose lyric text was empty.
    pub skipped_empty: usize,
}

/// Parses a `wav_path<TAB>lyric text` manifest. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut skipped_empty = 0;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let Some((wav, lyric)) = raw.split_once('\t') else {
            return Err(Error::Config(format!(
                "{}:{}: expected wav_path<TAB>text",
                path.display(),
                i + 1
            )));
        };
        if tokenize(lyric).is_empty() {
            skipped_empty += 1;
            continue;
        }
        let clip_id = wav.to_string();
        let wav = PathBuf::from(wav);
        records.push(ManifestRecord {
            line: i + 1,
            clip_id,
            wav_path: if wav.is_absolute() { wav } else { base.join(wav) },
            text: lyric.trim().to_string(),
        });
    }
    Ok(Manifest {
        records,
        skipped_empty,
    })
}

pub fn write_manifest(path: &Path, records: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (wav, text) in records {
        out.push_str(wav);
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Where the vocabulary for a loaded corpus comes from.
#[derive(Debug, Clone)]
pub enum VocabSource {
    Build { min_count: usize },
    Fixed(Vocabulary),
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub examples: Vec<PairedExample>,
    pub vocab: Vocabulary,
    pub skipped_empty: usize,
}

/// Loads every manifest record, computing each distinct clip's spectrogram once.
pub fn load_manifest(
    path: &Path,
    params: &SpectrogramParams,
    vocab: VocabSource,
) -> Result<LoadedCorpus> {
    let manifest = read_manifest(path)?;
    let vocab = match vocab {
        VocabSource::Fixed(v) => v,
        VocabSource::Build { min_count } => {
            build_vocab(manifest.records.iter().map(|r| r.text.as_str()), min_count)?
        }
    };
    let mut cache: HashMap<PathBuf, Arc<MelSpectrogram>> = HashMap::new();
    let mut examples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let spectrogram = match cache.get(&rec.wav_path) {
            Some(s) => Arc::clone(s),
            None => {
                let bytes = std::fs::read(&rec.wav_path).map_err(|_| Error::MissingAudio {
                    line: rec.line,
                    path: rec.wav_path.clone(),
                })?;
                let clip = audio::decode_wav(&bytes)?;
                let s = Arc::new(audio::to_mel_spectrogram(&clip, params)?);
                cache.insert(rec.wav_path.clone(), Arc::clone(&s));
                s
            }
        };
        examples.push(PairedExample {
            clip_id: rec.clip_id.clone(),
            spectrogram,
            line: LyricLine::from_text(&vocab, &rec.text)?,
        });
    }
    Ok(LoadedCorpus {
        examples,
        vocab,
        skipped_empty: manifest.skipped_empty,
    })
}

/// Splits by clip id so that all lines of one clip land on the same side.
/// Returns `(train, validation)` index lists in input order.
pub fn split_by_clip(
    examples: &[PairedExample],
    validation_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let clips: BTreeSet<&str> = examples.iter().map(|e| e.clip_id.as_str()).collect();
    let mut clips: Vec<&str> = clips.into_iter().collect();
    clips.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((clips.len() as f64 * validation_fraction).round() as usize)
        .min(clips.len().saturating_sub(1));
    let valid: BTreeSet<&str> = clips[..n_valid].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        if valid.contains(e.clip_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

const WORD_POOLS: [&[&str]; 4] = [
    &[
        "rain", "river", "ocean", "tide", "drown", "wave", "blue", "cold", "shore", "deep",
        "storm", "tears",
    ],
    &[
        "fire", "burn", "ember", "flame", "gold", "sun", "blaze", "ash", "smoke", "heat",
        "spark", "red",
    ],
    &[
        "night", "moon", "star", "dark", "silver", "dream", "sleep", "shadow", "ghost", "quiet",
        "dust", "sky",
    ],
    &[
        "road", "wheel", "highway", "dust", "engine", "mile", "town", "leave", "gone", "train",
        "whistle", "steel",
    ],
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    pub pairs_per_cluster: usize,
    /// Distinct lines per cluster; pairs draw from them with a Zipf-like preference.
    pub lines_per_cluster: usize,
    pub clip_seconds: f64,
    pub seed: u64,
    pub params: SpectrogramParams,
}

impl SyntheticConfig {
    pub fn new(n_clusters: usize, pairs_per_cluster: usize, seed: u64) -> Self {
        Self {
            n_clusters,
            pairs_per_cluster,
            lines_per_cluster: 12,
            clip_seconds: 10.0,
            seed,
            params: SpectrogramParams::desk(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub examples: Vec<PairedExample>,
    /// Audio of each example, at `params.target_rate`.
    pub clips: Vec<AudioClip>,
    /// Cluster of each example.
    pub clusters: Vec<usize>,
    /// Word pool of each cluster; pools are pairwise disjoint.
    pub pools: Vec<Vec<String>>,
    /// Frequency band (Hz) of each cluster's audio.
    pub bands: Vec<(f64, f64)>,
    pub vocab: Vocabulary,
}

impl SyntheticCorpus {
    /// Index of the cluster whose pool holds `token`, if any.
    pub fn cluster_of_token(&self, token: &str) -> Option<usize> {
        self.pools.iter().position(|p| p.iter().any(|w| w == token))
    }

    pub fn examples_of_cluster(&self, k: usize) -> impl Iterator<Item = &PairedExample> {
        self.examples
            .iter()
            .zip(&self.clusters)
            .filter(move |(_, &c)| c == k)
            .map(|(e, _)| e)
    }
}

fn word_pools(n: usize) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    (0..n)
        .map(|k| {
            let base: Vec<String> = match WORD_POOLS.get(k) {
                Some(words) => words.iter().map(|w| w.to_string()).collect(),
                None => (0..12).map(|j| format!("c{k}w{j}")).collect(),
            };
            base.into_iter().filter(|w| seen.insert(w.clone())).collect()
        })
        .collect()
}

/// Mel-spaced frequency bands, one per cluster, between 150 Hz and 0.9 x Nyquist.
fn cluster_bands(n: usize, rate: u32) -> Vec<(f64, f64)> {
    let lo = audio::hz_to_mel(150.0);
    let hi = audio::hz_to_mel(0.45 * rate as f64);
    let step = (hi - lo) / n as f64;
    (0..n)
        .map(|k| {
            let a = lo + step * k as f64;
            // Leave a gap between neighbouring bands.
            let b = a + step * 0.7;
            (audio::mel_to_hz(a), audio::mel_to_hz(b))
        })
        .collect()
}

/// Sum of sinusoids with slowly varying amplitude, quantized to 16 bits.
fn render_band_audio<R: Rng>(rng: &mut R, band: (f64, f64), rate: u32, seconds: f64) -> Vec<i16> {
    let n = (seconds * rate as f64).round() as usize;
    let mut signal = vec![0.0f64; n];
    let tones = 3;
    let partials = 8;
    for p in 0..tones + partials {
        let freq = rng.random_range(band.0..band.1);
        let amp = if p < tones {
            rng.random_range(0.05..0.2)
        } else {
            rng.random_range(0.005..0.03)
        };
        let phase = rng.random_range(0.0..2.0 * PI);
        let trem_rate = rng.random_range(0.1..0.8);
        let trem_phase = rng.random_range(0.0..2.0 * PI);
        // Oscillators advanced by complex rotation.
        let (mut re, mut im) = (phase.cos(), phase.sin());
        let w = 2.0 * PI * freq / rate as f64;
        let (cw, sw) = (w.cos(), w.sin());
        let (mut tre, mut tim) = (trem_phase.cos(), trem_phase.sin());
        let tw = 2.0 * PI * trem_rate / rate as f64;
        let (tcw, tsw) = (tw.cos(), tw.sin());
        for s in signal.iter_mut() {
            *s += amp * (0.6 + 0.4 * tim) * im;
            (re, im) = (re * cw - im * sw, re * sw + im * cw);
            (tre, tim) = (tre * tcw - tim * tsw, tre * tsw + tim * tcw);
        }
    }
    signal
        .into_iter()
        .map(|v| (v * 32767.0).clamp(-32768.0, 32767.0) as i16)
        .collect()
}

fn zipf_pick<R: Rng>(rng: &mut R, n: usize) -> usize {
    let total: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random_range(0.0..total);
    for r in 1..=n {
        u -= 1.0 / r as f64;
        if u <= 0.0 {
            return r - 1;
        }
    }
    n - 1
}

/// Builds a corpus in which cluster `k` pairs band-`k` audio with lines drawn only from
/// word pool `k`. Deterministic for a fixed config.
pub fn make_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_clusters < 2 {
        return Err(Error::Config("synthetic corpus needs at least two clusters".into()));
    }
    if cfg.pairs_per_cluster == 0 || cfg.lines_per_cluster == 0 {
        return Err(Error::Config("synthetic corpus needs pairs and lines".into()));
    }
    cfg.params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pools = word_pools(cfg.n_clusters);
    let bands = cluster_bands(cfg.n_clusters, cfg.params.target_rate);

    let line_texts: Vec<Vec<String>> = pools
        .iter()
        .map(|pool| {
            let mut lines = BTreeSet::new();
            let mut ordered = Vec::new();
            let mut attempts = 0;
            while ordered.len() < cfg.lines_per_cluster && attempts < 10_000 {
                attempts += 1;
                let len = rng.random_range(3..=6);
                let words: Vec<&str> = (0..len)
                    .map(|_| pool[rng.random_range(0..pool.len())].as_str())
                    .collect();
                let text = words.join(" ");
                if lines.insert(text.clone()) {
                    ordered.push(text);
                }
            }
            ordered
        })
        .collect();
    let vocab = build_vocab(line_texts.iter().flatten(), 1)?;

    let mut examples = Vec::new();
    let mut clips = Vec::new();
    let mut clusters = Vec::new();
    for i in 0..cfg.pairs_per_cluster {
        for k in 0..cfg.n_clusters {
            let samples =
                render_band_audio(&mut rng, bands[k], cfg.params.target_rate, cfg.clip_seconds);
            let clip = AudioClip::new(samples, cfg.params.target_rate, 1)?;
            let spectrogram = Arc::new(audio::to_mel_spectrogram(&clip, &cfg.params)?);
            let text = &line_texts[k][zipf_pick(&mut rng, line_texts[k].len())];
            examples.push(PairedExample {
                clip_id: format!("synth-c{k}-{i:05}"),
                spectrogram,
                line: LyricLine::from_text(&vocab, text)?,
            });
            clips.push(clip);
            clusters.push(k);
        }
    }
    Ok(SyntheticCorpus {
        examples,
        clips,
        clusters,
        pools,
        bands,
        vocab,
    })
}

/// Writes the corpus as WAV files plus a manifest; returns the manifest path.
pub fn write_synthetic_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("clips"))?;
    let mut records = Vec::with_capacity(corpus.examples.len());
    for (ex, clip) in corpus.examples.iter().zip(&corpus.clips) {
        let rel = format!("clips/{}.wav", ex.clip_id);
        std::fs::write(dir.join(&rel), audio::encode_wav(clip)?)?;
        records.push((rel, ex.line.source_text().to_string()));
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    let meta = serde_json::json!({
        "pools": corpus.pools,
        "clusters": corpus.clusters,
        "bands_hz": corpus.bands,
    });
    std::fs::write(dir.join("clusters.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct ClusterMeta {
    pools: Vec<Vec<String>>,
    clusters: Vec<usize>,
    bands_hz: Vec<(f64, f64)>,
}

/// Reads a corpus written by [`write_synthetic_corpus`]. Example order and clip ids
/// match [`load_manifest`] on the same directory.
pub fn read_synthetic_corpus(
    dir: &Path,
    params: &SpectrogramParams,
    vocab: VocabSource,
) -> Result<SyntheticCorpus> {
    let manifest = dir.join("manifest.tsv");
    let meta: ClusterMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("clusters.json"))?)?;
    let loaded = load_manifest(&manifest, params, vocab)?;
    if meta.clusters.len() != loaded.examples.len() {
        return Err(Error::Config(format!(
            "{}: {} cluster labels for {} examples",
            dir.display(),
            meta.clusters.len(),
            loaded.examples.len()
        )));
    }
    if let Some(&k) = meta.clusters.iter().find(|&&k| k >= meta.pools.len()) {
        return Err(Error::Config(format!("cluster {k} has no word pool")));
    }
    let clips = read_manifest(&manifest)?
        .records
        .iter()
        .map(|r| audio::decode_wav(&std::fs::read(&r.wav_path)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        examples: loaded.examples,
        clips,
        clusters: meta.clusters,
        pools: meta.pools,
        bands: meta.bands_hz,
        vocab: loaded.vocab,
    })
}
