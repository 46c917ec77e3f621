mod common;

use std::collections::{BTreeSet, HashSet};

use lyricjam::corpus::{self, build_vocab, split_by_clip, tokenize, LyricLine, PairedExample, SyntheticConfig};
use proptest::prelude::*;

#[test]
fn synthetic_corpus_is_deterministic_with_disjoint_pools() {
    let a = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 100, 3)).unwrap();
    let b = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 100, 3)).unwrap();
    assert_eq!(a.examples.len(), 200);
    assert_eq!(a.clips, b.clips);
    for (x, y) in a.examples.iter().zip(&b.examples) {
        assert_eq!(x.line, y.line);
        assert_eq!(x.spectrogram, y.spectrogram);
    }
    let pools: Vec<HashSet<&String>> = a.pools.iter().map(|p| p.iter().collect()).collect();
    assert!(pools[0].is_disjoint(&pools[1]));
    for (ex, &k) in a.examples.iter().zip(&a.clusters) {
        for tok in tokenize(ex.line.source_text()) {
            assert_eq!(a.cluster_of_token(&tok), Some(k));
        }
    }
}

/// Leave-one-out nearest-centroid classification on flattened spectrograms.
#[test]
fn clusters_are_separable_by_nearest_centroid() {
    let c = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 50, 8)).unwrap();
    let flat: Vec<Vec<f64>> = c
        .examples
        .iter()
        .map(|e| e.spectrogram.grid().iter().map(|&v| v as f64).collect())
        .collect();
    let dim = flat[0].len();
    let mut sums = vec![vec![0.0; dim]; 2];
    let mut counts = [0usize; 2];
    for (x, &k) in flat.iter().zip(&c.clusters) {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut correct = 0;
    for (x, &k) in flat.iter().zip(&c.clusters) {
        let dist = |j: usize| {
            let n = (counts[j] - usize::from(j == k)) as f64;
            sums[j]
                .iter()
                .zip(x)
                .map(|(s, v)| {
                    let centre = if j == k { (s - v) / n } else { s / n };
                    (centre - v).powi(2)
                })
                .sum::<f64>()
        };
        let guess = if dist(0) < dist(1) { 0 } else { 1 };
        correct += usize::from(guess == k);
    }
    assert_eq!(correct, flat.len());
}

#[test]
fn written_corpus_reads_back_identically() {
    let c = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 4, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus::write_synthetic_corpus(&c, dir.path()).unwrap();
    let back = corpus::read_synthetic_corpus(
        dir.path(),
        &SyntheticConfig::new(2, 4, 1).params,
        corpus::VocabSource::Fixed(c.vocab.clone()),
    )
    .unwrap();
    assert_eq!(back.clusters, c.clusters);
    assert_eq!(back.pools, c.pools);
    assert_eq!(back.clips, c.clips);
    for (a, b) in back.examples.iter().zip(&c.examples) {
        assert_eq!(a.line.tokens(), b.line.tokens());
        assert_eq!(a.spectrogram, b.spectrogram);
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

proptest! {
    #[test]
    fn tokenize_round_trip_for_in_vocab_lines(
        words in prop::collection::vec(word(), 1..15),
        upper in any::<bool>(),
    ) {
        let text = words.join(" ");
        let shown = if upper { text.to_uppercase() } else { text.clone() };
        let vocab = build_vocab([text.as_str()], 1).unwrap();
        let line = LyricLine::from_text(&vocab, &shown).unwrap();
        prop_assert_eq!(vocab.decode(line.tokens()), text);
    }

    #[test]
    fn split_never_leaks_a_clip(
        clip_of_pair in prop::collection::vec(0usize..15, 1..60),
        frac in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let vocab = build_vocab(["a b"], 1).unwrap();
        let spec = std::sync::Arc::new(common::ramp(16, 16, 0.0));
        let examples: Vec<PairedExample> = clip_of_pair
            .iter()
            .map(|c| PairedExample {
                clip_id: format!("clip{c}"),
                spectrogram: spec.clone(),
                line: LyricLine::from_text(&vocab, "a b").unwrap(),
            })
            .collect();
        let (train, val) = split_by_clip(&examples, frac, seed);
        prop_assert_eq!(train.len() + val.len(), examples.len());
        prop_assert!(!train.is_empty());
        let val_clips: BTreeSet<&str> = val.iter().map(|&i| examples[i].clip_id.as_str()).collect();
        prop_assert!(train.iter().all(|&i| !val_clips.contains(examples[i].clip_id.as_str())));
    }
}
