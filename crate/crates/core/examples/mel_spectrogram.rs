//! WAV decoding, stream segmentation and mel spectrograms.

use std::f64::consts::PI;

use lyricjam::audio::{self, AudioClip, MelFilterbank, SpectrogramParams};

fn tone(freq: f64, rate: u32, seconds: f64) -> AudioClip {
    let n = (rate as f64 * seconds) as usize;
    let samples = (0..n)
        .map(|i| (0.3 * (2.0 * PI * freq * i as f64 / rate as f64).sin() * 32767.0) as i16)
        .collect();
    AudioClip::new(samples, rate, 1).expect("valid clip")
}

fn main() -> lyricjam::Result<()> {
    let rate = 44_100;
    // 25 s through a WAV round trip, then cut into 10 s windows.
    let wav = audio::encode_wav(&tone(440.0, rate, 25.0))?;
    let clip = audio::decode_wav(&wav)?;
    let (windows, seg) = audio::segment_stream([&clip], 10.0, false)?;
    println!("{} windows, {} samples still buffered", windows.len(), seg.buffered_samples());

    let params = SpectrogramParams::default();
    let spec = audio::to_mel_spectrogram(&windows[0], &params)?;
    let means = spec.band_means();
    let loudest = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    let edges = MelFilterbank::new(params.target_rate, params.fft_size, params.mel_bands);
    println!(
        "{}x{} grid; loudest band {loudest} spans {:.0}-{:.0} Hz",
        spec.bands(),
        spec.frames(),
        edges.edges_hz()[loudest],
        edges.edges_hz()[loudest + 2]
    );

    let desk = audio::to_mel_spectrogram(&windows[0], &SpectrogramParams::desk())?;
    println!("desk-scale grid {}x{}", desk.bands(), desk.frames());
    Ok(())
}
