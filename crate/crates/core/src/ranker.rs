//! Scoring and top-k selection of candidate lines.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, LyricLine, Vocabulary};
use crate::error::{Error, Result};
use crate::text_cvae::TextCvae;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLine {
    pub text: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankerKind {
    Likelihood,
    Classifier,
}

impl std::str::FromStr for RankerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "likelihood" => Ok(Self::Likelihood),
            "classifier" => Ok(Self::Classifier),
            other => Err(Error::Config(format!("unknown ranker kind {other:?}"))),
        }
    }
}

/// Which ranker to use and where its checkpoint lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerSpec {
    pub kind: RankerKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl RankerSpec {
    pub fn likelihood() -> Self {
        Self {
            kind: RankerKind::Likelihood,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == RankerKind::Classifier && self.checkpoint.is_none() {
            return Err(Error::Config("classifier ranker needs a checkpoint".into()));
        }
        Ok(())
    }
}

pub trait LineScorer {
    /// One finite score per line, higher is better. Empty input is an error.
    fn score_lines(&self, lines: &[LyricLine], vocab: &Vocabulary) -> Result<Vec<f64>>;
}

fn require_nonempty(lines: &[LyricLine]) -> Result<()> {
    if lines.is_empty() {
        return Err(Error::Empty("no lines to score".into()));
    }
    Ok(())
}

/// Mean per-token log-probability (EOS included) of each line under a text
/// model, with the decoder conditioned on fixed context latents.
pub struct LikelihoodRanker {
    model: Arc<TextCvae>,
    z_t: Vec<f64>,
    z_s: Vec<f64>,
}

impl LikelihoodRanker {
    pub fn new(model: Arc<TextCvae>, z_t: Vec<f64>, z_s: Vec<f64>) -> Result<Self> {
        let d = model.latent_dim();
        for v in [&z_t, &z_s] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        Ok(Self { model, z_t, z_s })
    }
}

impl LineScorer for LikelihoodRanker {
    fn score_lines(&self, lines: &[LyricLine], _vocab: &Vocabulary) -> Result<Vec<f64>> {
        require_nonempty(lines)?;
        let mut scores = Vec::with_capacity(lines.len());
        for chunk in lines.chunks(128) {
            let refs: Vec<&LyricLine> = chunk.iter().collect();
            let z_t = vec![self.z_t.clone(); chunk.len()];
            let z_s = vec![self.z_s.clone(); chunk.len()];
            for (lp, n) in self.model.log_likelihood(&refs, &z_t, &z_s)? {
                scores.push(lp / n as f64);
            }
        }
        Ok(scores)
    }
}

/// Logistic regression over bag-of-words counts. The score is the
/// positive-class logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRanker {
    words: BTreeMap<String, usize>,
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Reads `label<TAB>text` rows; blank lines are skipped.
pub fn read_labeled_lines(path: &Path) -> Result<Vec<(bool, String)>> {
    parse_labeled_lines(&std::fs::read_to_string(path)?)
}

pub fn parse_labeled_lines(content: &str) -> Result<Vec<(bool, String)>> {
    let mut out = Vec::new();
    for (i, row) in content.lines().enumerate() {
        if row.trim().is_empty() {
            continue;
        }
        let (label, text) = row
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("line {}: expected label<TAB>text", i + 1)))?;
        let label = match label.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Config(format!(
                    "line {}: label must be 0 or 1, got {other:?}",
                    i + 1
                )))
            }
        };
        out.push((label, text.to_string()));
    }
    Ok(out)
}

impl ClassifierRanker {
    /// Full-batch gradient descent on the mean logistic loss.
    pub fn train(data: &[(bool, String)], cfg: ClassifierConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("no labeled lines".into()));
        }
        let mut words = BTreeMap::new();
        for (_, text) in data {
            for tok in tokenize(text) {
                let next = words.len();
                words.entry(tok).or_insert(next);
            }
        }
        let mut model = Self {
            weights: vec![0.0; words.len()],
            words,
            bias: 0.0,
        };
        let features: Vec<Vec<(usize, f64)>> = data.iter().map(|(_, t)| model.features(t)).collect();
        let n = data.len() as f64;
        for _ in 0..cfg.epochs {
            let mut grad = vec![0.0; model.weights.len()];
            let mut grad_b = 0.0;
            for ((label, _), x) in data.iter().zip(&features) {
                let p = sigmoid(model.logit_of(x));
                let err = p - if *label { 1.0 } else { 0.0 };
                for &(j, v) in x {
                    grad[j] += err * v;
                }
                grad_b += err;
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
            }
            model.bias -= cfg.learning_rate * grad_b / n;
        }
        Ok(model)
    }

    fn features(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(&j) = self.words.get(&tok) {
                *counts.entry(j).or_default() += 1.0;
            }
        }
        counts.into_iter().collect()
    }

    fn logit_of(&self, x: &[(usize, f64)]) -> f64 {
        self.bias + x.iter().map(|&(j, v)| self.weights[j] * v).sum::<f64>()
    }

    pub fn logit(&self, text: &str) -> f64 {
        self.logit_of(&self.features(text))
    }

    pub fn accuracy(&self, data: &[(bool, String)]) -> f64 {
        let correct = data
            .iter()
            .filter(|(label, text)| (self.logit(text) > 0.0) == *label)
            .count();
        correct as f64 / data.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if model.weights.len() != model.words.len() {
            return Err(Error::Config("classifier checkpoint is inconsistent".into()));
        }
        Ok(model)
    }
}

impl LineScorer for ClassifierRanker {
    fn score_lines(&self, lines: &[LyricLine], vocab: &Vocabulary) -> Result<Vec<f64>> {
        require_nonempty(lines)?;
        Ok(lines
            .iter()
            .map(|l| self.logit(&vocab.decode(l.tokens())))
            .collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draw `k` of the `m` best lines uniformly instead of taking the top `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopSampling {
    pub m: usize,
    pub seed: u64,
}

/// The `k` best distinct lines, score-descending. Exact duplicates keep their
/// first occurrence; ties keep input order.
pub fn top_k(lines: &[String], scores: &[f64], k: usize) -> Result<Vec<RankedLine>> {
    select(lines, scores, k, None)
}

/// Like [`top_k`], optionally sampling `k` lines from the best `m`.
pub fn select(
    lines: &[String],
    scores: &[f64],
    k: usize,
    sampling: Option<TopSampling>,
) -> Result<Vec<RankedLine>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if lines.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: lines.len(),
            actual: scores.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Config(format!("non-finite score {bad}")));
    }
    let mut seen = HashSet::new();
    let mut order: Vec<usize> = (0..lines.len())
        .filter(|&i| seen.insert(lines[i].as_str()))
        .collect();
    // Stable, so equal scores keep first-seen order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let chosen: Vec<usize> = match sampling {
        Some(TopSampling { m, seed }) if m > k => {
            let pool = &order[..m.min(order.len())];
            let take = k.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i]).collect()
        }
        _ => order.into_iter().take(k).collect(),
    };
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(r, i)| RankedLine {
            text: lines[i].clone(),
            score: scores[i],
            rank: r + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn picks_best_two_of_hundred() {
        let lines: Vec<String> = (0..100).map(|i| format!("line {i}")).collect();
        let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let top = top_k(&lines, &scores, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].score, 99.0);
        assert_eq!(top[1].score, 98.0);
        assert_eq!((top[0].rank, top[1].rank), (1, 2));
    }

    #[test]
    fn ties_keep_input_order() {
        let top = top_k(&texts(&["c", "a", "b"]), &[1.0, 1.0, 1.0], 3).unwrap();
        let order: Vec<&str> = top.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn duplicates_collapse_and_k_caps() {
        let top = top_k(&texts(&["x", "y", "x"]), &[3.0, 1.0, 3.0], 5).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].text, "x");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(top_k(&texts(&["a"]), &[1.0], 0).is_err());
        assert!(top_k(&texts(&["a"]), &[1.0, 2.0], 1).is_err());
        assert!(top_k(&texts(&["a"]), &[f64::NAN], 1).is_err());
    }

    #[test]
    fn sampling_stays_in_top_m() {
        let lines: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        for seed in 0..20 {
            let top = select(&lines, &scores, 2, Some(TopSampling { m: 5, seed })).unwrap();
            assert_eq!(top.len(), 2);
            assert!(top.iter().all(|r| r.score >= 15.0));
            assert!(top[0].score > top[1].score);
        }
    }

    #[test]
    fn labeled_file_parsing() {
        let rows = parse_labeled_lines("1\tgood line\n\n0\tbad line\n").unwrap();
        assert_eq!(rows, vec![(true, "good line".into()), (false, "bad line".into())]);
        assert!(parse_labeled_lines("2\tx").is_err());
        assert!(parse_labeled_lines("no tab").is_err());
    }

    #[test]
    fn classifier_learns_separable_words() {
        let data: Vec<(bool, String)> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    (true, format!("bright shining {}", i % 5))
                } else {
                    (false, format!("dull grey {}", i % 5))
                }
            })
            .collect();
        let model = ClassifierRanker::train(&data, ClassifierConfig::default()).unwrap();
        assert_eq!(model.accuracy(&data), 1.0);
        assert!(model.logit("bright") > model.logit("grey"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        model.save(&path).unwrap();
        assert_eq!(ClassifierRanker::load(&path).unwrap(), model);
    }

    #[test]
    fn spec_requires_checkpoint_for_classifier() {
        let spec = RankerSpec {
            kind: RankerKind::Classifier,
            checkpoint: None,
        };
        assert!(spec.validate().is_err());
        assert!(RankerSpec::likelihood().validate().is_ok());
        assert_eq!("classifier".parse::<RankerKind>().unwrap(), RankerKind::Classifier);
    }
}
