//! PCM WAV decoding, live-stream segmentation and mel-spectrogram extraction.

use std::f64::consts::PI;
use std::io::Cursor;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved signed 16-bit PCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioClip {
    samples: Vec<i16>,
    sample_rate: u32,
    channels: u16,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>, sample_rate: u32, channels: u16) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::UnsupportedFormat("sample rate must be positive".into()));
        }
        if !(channels == 1 || channels == 2) {
            return Err(Error::UnsupportedFormat(format!(
                "{channels} channels (only mono and stereo are supported)"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Empty("audio clip has no samples".into()));
        }
        if samples.len() % channels as usize != 0 {
            return Err(Error::UnsupportedFormat(format!(
                "{} samples is not a whole number of {channels}-channel frames",
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<i16> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Number of sample frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    /// Channel mean, scaled to [-1, 1).
    pub fn mono_f64(&self) -> Vec<f64> {
        let ch = self.channels as usize;
        self.samples
            .chunks_exact(ch)
            .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / (ch as f64 * 32768.0))
            .collect()
    }
}

/// Decodes an uncompressed 16-bit PCM RIFF/WAVE file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| match e {
        hound::Error::Unsupported => {
            Error::UnsupportedFormat("compressed or non-PCM wav encoding".into())
        }
        other => Error::WavDecode(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat("floating-point samples".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit samples (only 16-bit is supported)",
            spec.bits_per_sample
        )));
    }
    if !(spec.channels == 1 || spec.channels == 2) {
        return Err(Error::UnsupportedFormat(format!("{} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::WavDecode(e.to_string()))?;
    if samples.is_empty() {
        return Err(Error::WavDecode("empty data chunk".into()));
    }
    AudioClip::new(samples, spec.sample_rate, spec.channels)
}

/// Encodes a clip as a 16-bit PCM WAV file.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: clip.channels,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::WavDecode(e.to_string()))?;
        for &s in &clip.samples {
            writer
                .write_sample(s)
                .map_err(|e| Error::WavDecode(e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::WavDecode(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

/// Little-endian PCM bytes to samples.
pub fn pcm_from_le_bytes(bytes: &[u8]) -> Result<Vec<i16>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Session(format!(
            "odd payload length {} for 16-bit PCM",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub fn pcm_to_le_bytes(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

/// Cuts one session's audio stream into consecutive non-overlapping windows.
#[derive(Debug, Clone)]
pub struct Segmenter {
    sample_rate: u32,
    channels: u16,
    window_frames: usize,
    buffer: Vec<i16>,
    received: usize,
    emitted: usize,
    padded: usize,
}

impl Segmenter {
    pub fn new(sample_rate: u32, channels: u16, window_seconds: f64) -> Result<Self> {
        if sample_rate == 0 || !(channels == 1 || channels == 2) {
            return Err(Error::UnsupportedFormat(format!(
                "{sample_rate} Hz, {channels} channels"
            )));
        }
        let window_frames = (window_seconds * sample_rate as f64).round() as usize;
        if window_frames == 0 {
            return Err(Error::Config("window must hold at least one frame".into()));
        }
        Ok(Self {
            sample_rate,
            channels,
            window_frames,
            buffer: Vec::new(),
            received: 0,
            emitted: 0,
            padded: 0,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    fn window_samples(&self) -> usize {
        self.window_frames * self.channels as usize
    }

    /// Appends a chunk; the chunk's format must match the session's.
    pub fn push(&mut self, chunk: &AudioClip) -> Result<Vec<AudioClip>> {
        if chunk.sample_rate != self.sample_rate {
            return Err(Error::Session(format!(
                "sample rate changed from {} to {} mid-stream",
                self.sample_rate, chunk.sample_rate
            )));
        }
        if chunk.channels != self.channels {
            return Err(Error::Session(format!(
                "channel count changed from {} to {} mid-stream",
                self.channels, chunk.channels
            )));
        }
        self.push_interleaved(&chunk.samples)
    }

    /// Appends raw interleaved samples in the session's format.
    pub fn push_interleaved(&mut self, samples: &[i16]) -> Result<Vec<AudioClip>> {
        if samples.len() % self.channels as usize != 0 {
            return Err(Error::Session(format!(
                "{} samples is not a whole number of {}-channel frames",
                samples.len(),
                self.channels
            )));
        }
        self.received += samples.len();
        self.buffer.extend_from_slice(samples);
        let n = self.window_samples();
        let mut out = Vec::new();
        while self.buffer.len() >= n {
            let rest = self.buffer.split_off(n);
            let window = std::mem::replace(&mut self.buffer, rest);
            self.emitted += n;
            out.push(AudioClip::new(window, self.sample_rate, self.channels)?);
        }
        Ok(out)
    }

    /// Ends the session: a partial window is zero-padded to full length.
    pub fn flush(&mut self) -> Option<AudioClip> {
        if self.buffer.is_empty() {
            return None;
        }
        let mut window = std::mem::take(&mut self.buffer);
        let pad = self.window_samples() - window.len();
        window.resize(self.window_samples(), 0);
        self.emitted += window.len() - pad;
        self.padded += pad;
        AudioClip::new(window, self.sample_rate, self.channels).ok()
    }

    pub fn buffered_samples(&self) -> usize {
        self.buffer.len()
    }

    pub fn received_samples(&self) -> usize {
        self.received
    }

    /// Received samples that have left the buffer inside a clip (padding excluded).
    pub fn emitted_samples(&self) -> usize {
        self.emitted
    }

    pub fn padding_samples(&self) -> usize {
        self.padded
    }
}

/// Segments a whole chunk sequence; `flush` pads and emits a trailing partial window.
pub fn segment_stream<'a, I>(chunks: I, window_seconds: f64, flush: bool) -> Result<(Vec<AudioClip>, Segmenter)>
where
    I: IntoIterator<Item = &'a AudioClip>,
{
    let mut iter = chunks.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::Empty("no audio chunks".into()))?;
    let mut seg = Segmenter::new(first.sample_rate, first.channels, window_seconds)?;
    let mut clips = Vec::new();
    for chunk in iter {
        clips.extend(seg.push(chunk)?);
    }
    if flush {
        clips.extend(seg.flush());
    }
    Ok((clips, seg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramParams {
    pub target_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub mel_bands: usize,
    pub db_floor: f64,
    pub db_ceiling: f64,
    pub frame_pad_to: usize,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self {
            target_rate: 22_050,
            fft_size: 2048,
            hop: 512,
            mel_bands: 128,
            db_floor: -80.0,
            db_ceiling: 0.0,
            frame_pad_to: 432,
        }
    }
}

impl SpectrogramParams {
    /// Coarse 32 x 160 grid used for the small models trained in tests and examples.
    pub fn desk() -> Self {
        Self {
            target_rate: 8_000,
            fft_size: 512,
            hop: 512,
            mel_bands: 32,
            db_floor: -80.0,
            db_ceiling: 0.0,
            frame_pad_to: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("spectrogram params: {m}")));
        if self.target_rate == 0 {
            return bad("target_rate must be positive");
        }
        if self.fft_size < 2 {
            return bad("fft_size must be at least 2");
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return bad("hop must be in 1..=fft_size");
        }
        if self.mel_bands == 0 {
            return bad("mel_bands must be positive");
        }
        if !(self.db_floor < self.db_ceiling) {
            return bad("db_floor must be below db_ceiling");
        }
        if self.frame_pad_to == 0 {
            return bad("frame_pad_to must be positive");
        }
        Ok(())
    }

    /// Frames produced by centered framing of `n` samples, before padding.
    pub fn frames_for(&self, n: usize) -> usize {
        1 + n / self.hop
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mel_bands, self.frame_pad_to)
    }
}

/// Row-major `mel_bands x frames` grid with every cell in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    grid: Vec<f32>,
    bands: usize,
    frames: usize,
}

impl MelSpectrogram {
    pub fn from_grid(grid: Vec<f32>, bands: usize, frames: usize) -> Result<Self> {
        if grid.len() != bands * frames {
            return Err(Error::ShapeMismatch {
                expected: vec![bands, frames],
                actual: vec![grid.len()],
            });
        }
        if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("spectrogram cell {v} outside [0, 1]")));
        }
        Ok(Self {
            grid,
            bands,
            frames,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bands, self.frames)
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.grid[band * self.frames + frame]
    }

    /// Mean over time of each band.
    pub fn band_means(&self) -> Vec<f64> {
        self.grid
            .chunks_exact(self.frames)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / self.frames as f64)
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale spanning 0 Hz to Nyquist, each peaking at 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `bands x (fft_size/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
    /// Edge frequencies in Hz, `bands + 2` of them.
    edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, fft_size: usize, bands: usize) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let weights = (0..bands)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / fft_size as f64;
                        let rising = (f - lo) / (mid - lo);
                        let falling = (hi - f) / (hi - mid);
                        rising.min(falling).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { weights, edges }
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Band-limited resampling by windowed-sinc interpolation.
pub fn resample(input: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let ratio = to as f64 / from as f64;
    // Anti-aliasing cutoff relative to the input Nyquist frequency.
    let cutoff = ratio.min(1.0) * 0.95;
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = (input.len() as u64 * to as u64 / from as u64) as usize;
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let start = (t - half_width).ceil().max(0.0) as usize;
            let end = ((t + half_width).floor() as usize).min(input.len() - 1);
            (start..=end)
                .map(|k| {
                    let x = t - k as f64;
                    let arg = cutoff * x;
                    let sinc = if arg.abs() < 1e-12 {
                        1.0
                    } else {
                        (PI * arg).sin() / (PI * arg)
                    };
                    let window = 0.5 + 0.5 * (PI * x / half_width).cos();
                    input[k] * cutoff * sinc * window
                })
                .sum()
        })
        .collect()
}

/// Converts a clip into a normalized mel-spectrogram.
pub fn to_mel_spectrogram(clip: &AudioClip, params: &SpectrogramParams) -> Result<MelSpectrogram> {
    params.validate()?;
    let mono = resample(&clip.mono_f64(), clip.sample_rate, params.target_rate);
    mel_spectrogram_from_signal(&mono, params)
}

/// Same as [`to_mel_spectrogram`] for a mono signal already at `params.target_rate`.
pub fn mel_spectrogram_from_signal(signal: &[f64], params: &SpectrogramParams) -> Result<MelSpectrogram> {
    params.validate()?;
    let n_fft = params.fft_size;
    if signal.len() < n_fft {
        return Err(Error::ClipTooShort {
            samples: signal.len(),
            needed: n_fft,
        });
    }
    // Centered framing with reflection at both ends.
    let half = n_fft / 2;
    let mut padded = Vec::with_capacity(signal.len() + 2 * half);
    padded.extend((1..=half).rev().map(|i| signal[i]));
    padded.extend_from_slice(signal);
    let last = signal.len() - 1;
    padded.extend((1..=half).map(|i| signal[last - i]));

    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
        .collect();
    let window_sum: f64 = window.iter().sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let filterbank = MelFilterbank::new(params.target_rate, n_fft, params.mel_bands);

    let frames = params.frames_for(signal.len());
    let kept = frames.min(params.frame_pad_to);
    let bins = n_fft / 2 + 1;
    let range = params.db_ceiling - params.db_floor;
    let mut grid = vec![0f32; params.mel_bands * params.frame_pad_to];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    for t in 0..kept {
        let frame = &padded[t * params.hop..t * params.hop + n_fft];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..bins]) {
            *p = c.norm_sqr() / (window_sum * window_sum);
        }
        for (m, energy) in filterbank.apply(&power).into_iter().enumerate() {
            let db = if energy > 0.0 {
                10.0 * energy.log10()
            } else {
                f64::NEG_INFINITY
            };
            let clamped = db.clamp(params.db_floor, params.db_ceiling);
            grid[m * params.frame_pad_to + t] = ((clamped - params.db_floor) / range) as f32;
        }
    }
    MelSpectrogram::from_grid(grid, params.mel_bands, params.frame_pad_to)
}
