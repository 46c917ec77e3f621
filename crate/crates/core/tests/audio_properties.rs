mod common;

use lyricjam::audio::{self, AudioClip, MelFilterbank, Segmenter, SpectrogramParams};
use proptest::prelude::*;

#[test]
fn ten_seconds_at_cd_rate_decodes_to_441000_samples() {
    let clip = AudioClip::new(common::sine_pcm(220.0, 44_100, 1, 10.0), 44_100, 1).unwrap();
    let back = audio::decode_wav(&audio::encode_wav(&clip).unwrap()).unwrap();
    assert_eq!(back.samples().len(), 441_000);
    assert_eq!(back.sample_rate(), 44_100);
    assert_eq!(back, clip);
}

#[test]
fn a440_peaks_in_the_band_around_440_hz() {
    let params = SpectrogramParams::default();
    let clip = AudioClip::new(common::sine_pcm(440.0, 44_100, 2, 10.0), 44_100, 2).unwrap();
    let spec = audio::to_mel_spectrogram(&clip, &params).unwrap();
    assert_eq!(spec.shape(), (128, 432));
    let means = spec.band_means();
    let peak = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    // Oracle: the filter whose centre frequency lies nearest 440 Hz.
    let edges = MelFilterbank::new(params.target_rate, params.fft_size, params.mel_bands);
    let centres = &edges.edges_hz()[1..=params.mel_bands];
    let nearest = (0..centres.len())
        .min_by(|&a, &b| (centres[a] - 440.0).abs().total_cmp(&(centres[b] - 440.0).abs()))
        .unwrap();
    assert!(peak.abs_diff(nearest) <= 1, "peak band {peak}, nearest centre band {nearest}");
}

#[test]
fn shape_is_fixed_for_any_valid_clip() {
    let params = SpectrogramParams::desk();
    for (freq, seconds) in [(100.0, 10.0), (1500.0, 10.0), (700.0, 9.0), (300.0, 12.0)] {
        let clip = AudioClip::new(common::sine_pcm(freq, 8_000, 1, seconds), 8_000, 1).unwrap();
        let spec = audio::to_mel_spectrogram(&clip, &params).unwrap();
        assert_eq!(spec.shape(), params.shape());
        assert!(spec.grid().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn louder_input_never_lowers_a_cell(
        seed in any::<u64>(),
        g1 in 0.01f64..1.0,
        factor in 1.0f64..4.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = SpectrogramParams { frame_pad_to: 16, ..SpectrogramParams::desk() };
        let signal: Vec<f64> = (0..8_000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let scaled = |g: f64| signal.iter().map(|v| v * g).collect::<Vec<_>>();
        let quiet = audio::mel_spectrogram_from_signal(&scaled(g1), &params).unwrap();
        let loud = audio::mel_spectrogram_from_signal(&scaled(g1 * factor), &params).unwrap();
        for (a, b) in quiet.grid().iter().zip(loud.grid()) {
            prop_assert!(b + 1e-6 >= *a);
        }
    }

    #[test]
    fn segmentation_conserves_samples(
        chunks in prop::collection::vec(0usize..30_000, 0..12),
        channels in 1u16..3,
    ) {
        let rate = 1_000;
        let mut seg = Segmenter::new(rate, channels, 10.0).unwrap();
        let window = 10 * rate as usize * channels as usize;
        let mut emitted = 0;
        let mut total = 0;
        for frames in chunks {
            let samples = vec![1i16; frames * channels as usize];
            total += samples.len();
            for clip in seg.push_interleaved(&samples).unwrap() {
                prop_assert_eq!(clip.samples().len(), window);
                emitted += 1;
            }
        }
        prop_assert_eq!(emitted, total / window);
        prop_assert_eq!(seg.buffered_samples(), total % window);
        let tail = seg.flush();
        prop_assert_eq!(tail.is_some(), total % window != 0);
        if let Some(t) = tail {
            prop_assert_eq!(t.samples().len(), window);
            prop_assert_eq!(t.samples().iter().filter(|&&s| s == 1).count(), total % window);
        }
    }
}

#[test]
fn stream_of_25_seconds_leaves_five_buffered() {
    let clip = AudioClip::new(common::sine_pcm(200.0, 8_000, 1, 25.0), 8_000, 1).unwrap();
    let (clips, seg) = audio::segment_stream([&clip], 10.0, false).unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(seg.buffered_samples(), 40_000);
    let short = AudioClip::new(common::sine_pcm(200.0, 8_000, 1, 9.9), 8_000, 1).unwrap();
    let (clips, _) = audio::segment_stream([&short], 10.0, true).unwrap();
    assert_eq!(clips.len(), 1);
    assert_eq!(clips[0].samples().len(), 80_000);
}
