//! Proxy metrics: latent alignment error, cluster purity and diversity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::corpus::{tokenize, PairedExample, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::service::{self, GenerationOptions, Mode, Models};
use crate::spec_vae::SpecVae;
use crate::text_cvae::TextCvae;

/// Unique n-grams over total n-grams across `lines`; 0 when no line has `n` tokens.
pub fn distinct_n<S: AsRef<str>>(lines: &[Vec<S>], n: usize) -> f64 {
    assert!(n > 0, "n-gram order must be positive");
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for line in lines {
        let toks: Vec<&str> = line.iter().map(AsRef::as_ref).collect();
        for gram in toks.windows(n) {
            total += 1;
            seen.insert(gram.to_vec());
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Fraction of tokens that belong to their clip's cluster pool. Each sample is
/// `(cluster, tokens)`; 0 when there are no tokens.
pub fn purity<S: AsRef<str>>(samples: &[(usize, Vec<S>)], pools: &[Vec<String>]) -> f64 {
    let pool_sets: Vec<HashSet<&str>> = pools
        .iter()
        .map(|p| p.iter().map(String::as_str).collect())
        .collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (cluster, toks) in samples {
        for t in toks {
            total += 1;
            if pool_sets.get(*cluster).is_some_and(|p| p.contains(t.as_ref())) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Posterior means `(μ_s, μ_t)` of each example, the text encoded given `μ_s`.
pub fn posterior_means(
    spec_vae: &SpecVae,
    text_model: &TextCvae,
    examples: &[&PairedExample],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let specs: Vec<&MelSpectrogram> = examples.iter().map(|e| e.spectrogram.as_ref()).collect();
    let mu_s: Vec<Vec<f64>> = spec_vae
        .encode_all(&specs)?
        .into_iter()
        .map(|g| g.mean().to_vec())
        .collect();
    let lines: Vec<_> = examples.iter().map(|e| &e.line).collect();
    let mu_t = text_model
        .encode_batch(&lines, &mu_s)?
        .into_iter()
        .map(|g| g.mean().to_vec())
        .collect();
    Ok((mu_s, mu_t))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean `‖G(μ_s) − μ_t‖²` over held-out pairs, with posterior means throughout.
pub fn alignment_mse(
    spec_vae: &SpecVae,
    text_model: &TextCvae,
    gan: &GanModel,
    heldout: &[&PairedExample],
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set is empty".into()));
    }
    let (mu_s, mu_t) = posterior_means(spec_vae, text_model, heldout)?;
    let pred = gan.predict_batch(&mu_s)?;
    let total: f64 = pred.iter().zip(&mu_t).map(|(p, t)| sq_dist(p, t)).sum();
    Ok(total / heldout.len() as f64)
}

/// For each cluster, the fraction of its held-out clips whose `G(μ_s)` is nearer that
/// cluster's text-latent centroid than any other. Centroids average `μ_t` over
/// `reference`; samples are `(cluster, example)`.
pub fn centroid_transfer(
    spec_vae: &SpecVae,
    text_model: &TextCvae,
    gan: &GanModel,
    reference: &[(usize, &PairedExample)],
    heldout: &[(usize, &PairedExample)],
) -> Result<Vec<f64>> {
    if reference.is_empty() || heldout.is_empty() {
        return Err(Error::Empty("centroid probe needs reference and held-out pairs".into()));
    }
    let n_clusters = reference.iter().chain(heldout).map(|(c, _)| c + 1).max().unwrap_or(0);
    let examples: Vec<&PairedExample> = reference.iter().map(|(_, e)| *e).collect();
    let (_, mu_t) = posterior_means(spec_vae, text_model, &examples)?;
    let d = text_model.latent_dim();
    let mut sums = vec![vec![0.0; d]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for ((c, _), m) in reference.iter().zip(&mu_t) {
        counts[*c] += 1;
        for (s, v) in sums[*c].iter_mut().zip(m) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Empty(format!("no reference pairs for cluster {c}")));
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let specs: Vec<&MelSpectrogram> = heldout.iter().map(|(_, e)| e.spectrogram.as_ref()).collect();
    let mu_s: Vec<Vec<f64>> = spec_vae
        .encode_all(&specs)?
        .into_iter()
        .map(|g| g.mean().to_vec())
        .collect();
    let pred = gan.predict_batch(&mu_s)?;
    let mut hits = vec![0usize; n_clusters];
    let mut totals = vec![0usize; n_clusters];
    for ((c, _), p) in heldout.iter().zip(&pred) {
        totals[*c] += 1;
        let nearest = centroids
            .iter()
            .enumerate()
            .min_by(|a, b| sq_dist(p, a.1).total_cmp(&sq_dist(p, b.1)))
            .map(|(k, _)| k);
        if nearest == Some(*c) {
            hits[*c] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect())
}

/// Alignment error of the trained generator and of a fresh one built from the same config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub latent_mse: f64,
    pub untrained_latent_mse: f64,
}

pub fn alignment_report(
    spec_vae: &SpecVae,
    text_model: &TextCvae,
    gan: &GanModel,
    heldout: &[&PairedExample],
) -> Result<AlignmentReport> {
    let fresh = GanModel::new(gan.config().clone())?;
    Ok(AlignmentReport {
        latent_mse: alignment_mse(spec_vae, text_model, gan, heldout)?,
        untrained_latent_mse: alignment_mse(spec_vae, text_model, &fresh, heldout)?,
    })
}

/// Lines generated for held-out clips in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSet {
    pub mode: Mode,
    /// `(cluster, lines)` per clip, in clip order.
    pub clips: Vec<(usize, Vec<String>)>,
}

impl GeneratedSet {
    pub fn token_lines(&self) -> Vec<Vec<String>> {
        self.clips
            .iter()
            .flat_map(|(_, lines)| lines.iter().map(|l| tokenize(l)))
            .collect()
    }

    pub fn purity(&self, pools: &[Vec<String>]) -> f64 {
        let samples: Vec<(usize, Vec<String>)> = self
            .clips
            .iter()
            .flat_map(|(c, lines)| lines.iter().map(move |l| (*c, tokenize(l))))
            .collect();
        purity(&samples, pools)
    }
}

/// Generates the `k` ranked lines of each held-out clip (clip `i` uses seed `seed + i`).
pub fn generate_for_heldout(
    models: &Models,
    corpus: &SyntheticCorpus,
    heldout: &[usize],
    mode: Mode,
    opts: &GenerationOptions,
    seed: u64,
) -> Result<GeneratedSet> {
    let mut clips = Vec::with_capacity(heldout.len());
    for (i, &idx) in heldout.iter().enumerate() {
        let spec = &corpus.examples[idx].spectrogram;
        let lines = service::generate_lines(models, spec, mode, opts, seed.wrapping_add(i as u64))?;
        clips.push((corpus.clusters[idx], lines.into_iter().map(|l| l.text).collect()));
    }
    Ok(GeneratedSet { mode, clips })
}

/// Token purity of `mode` on held-out clips at the deployment temperature.
pub fn purity_report(
    models: &Models,
    corpus: &SyntheticCorpus,
    heldout: &[usize],
    mode: Mode,
    opts: &GenerationOptions,
    seed: u64,
) -> Result<f64> {
    let set = generate_for_heldout(models, corpus, heldout, mode, opts, seed)?;
    Ok(set.purity(&corpus.pools))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub latent_mse: Option<f64>,
    pub cluster_purity: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub mean_line_len: f64,
}

impl ModeMetrics {
    pub fn from_set(set: &GeneratedSet, pools: &[Vec<String>], latent_mse: Option<f64>) -> Self {
        let lines = set.token_lines();
        let tokens: usize = lines.iter().map(Vec::len).sum();
        Self {
            latent_mse,
            cluster_purity: set.purity(pools),
            distinct_1: distinct_n(&lines, 1),
            distinct_2: distinct_n(&lines, 2),
            mean_line_len: if lines.is_empty() {
                0.0
            } else {
                tokens as f64 / lines.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub seeds: Vec<u64>,
    pub alignment: Option<AlignmentReport>,
    /// Per-cluster centroid probe of the GAN; see [`centroid_transfer`].
    pub centroid_transfer: Option<Vec<f64>>,
    pub modes: BTreeMap<Mode, ModeMetrics>,
}

/// Pass/fail limits checked by [`EvalReport::failures`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    pub min_topology_purity: f64,
    pub min_purity_gap: f64,
    /// Trained-to-untrained latent MSE ratio ceiling.
    pub max_mse_ratio: f64,
    /// Floor on every cluster's centroid-probe fraction.
    pub min_centroid_transfer: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            min_topology_purity: 0.8,
            min_purity_gap: 0.15,
            max_mse_ratio: 0.5,
            min_centroid_transfer: 0.8,
        }
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column table, one row per mode.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut rows = vec![vec![
            "mode".to_string(),
            "latent_mse".into(),
            "cluster_purity".into(),
            "distinct_1".into(),
            "distinct_2".into(),
            "mean_line_len".into(),
        ]];
        for (mode, m) in &self.modes {
            rows.push(vec![
                mode.to_string(),
                fmt(m.latent_mse),
                fmt(Some(m.cluster_purity)),
                fmt(Some(m.distinct_1)),
                fmt(Some(m.distinct_2)),
                fmt(Some(m.mean_line_len)),
            ]);
        }
        let mut out = format!("corpus: {}\nseeds: {:?}\n", self.corpus, self.seeds);
        if let Some(a) = &self.alignment {
            let _ = writeln!(
                out,
                "latent_mse: trained {:.4}, untrained {:.4}",
                a.latent_mse, a.untrained_latent_mse
            );
        }
        if let Some(c) = &self.centroid_transfer {
            let cells: Vec<String> = c.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(out, "centroid_transfer: {}", cells.join(" "));
        }
        out.push_str(&align_columns(&rows));
        out
    }

    /// Descriptions of every threshold the report misses.
    pub fn failures(&self, t: &EvalThresholds) -> Vec<String> {
        let mut out = Vec::new();
        let topo = self.modes.get(&Mode::Topology).map(|m| m.cluster_purity);
        let base = self.modes.get(&Mode::Baseline).map(|m| m.cluster_purity);
        if let Some(p) = topo {
            if p < t.min_topology_purity {
                out.push(format!("topology purity {p:.4} < {}", t.min_topology_purity));
            }
            if let Some(b) = base {
                if p - b < t.min_purity_gap {
                    out.push(format!("purity gap {:.4} < {}", p - b, t.min_purity_gap));
                }
            }
        }
        if let Some(a) = &self.alignment {
            let ratio = a.latent_mse / a.untrained_latent_mse;
            if !(ratio <= t.max_mse_ratio) {
                out.push(format!("latent MSE ratio {ratio:.4} > {}", t.max_mse_ratio));
            }
        }
        if let Some(c) = &self.centroid_transfer {
            for (k, v) in c.iter().enumerate() {
                if !(*v >= t.min_centroid_transfer) {
                    out.push(format!("cluster {k} centroid transfer {v:.4} < {}", t.min_centroid_transfer));
                }
            }
        }
        out
    }
}

/// Left-aligned columns separated by two spaces.
pub fn align_columns(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Full report over the three modes; modes without checkpoints are left out.
/// Text-latent centroids for the probe come from the `train` examples.
pub fn evaluate(
    models: &Models,
    corpus: &SyntheticCorpus,
    train: &[usize],
    heldout: &[usize],
    opts: &GenerationOptions,
    seed: u64,
) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set is empty".into()));
    }
    let heldout_examples: Vec<&PairedExample> = heldout.iter().map(|&i| &corpus.examples[i]).collect();
    let alignment = match (&models.gan, &models.text_standard) {
        (Some(gan), Some(text)) => Some(alignment_report(&models.spec_vae, text, gan, &heldout_examples)?),
        _ => None,
    };
    let labeled = |idx: &[usize]| -> Vec<(usize, &PairedExample)> {
        idx.iter().map(|&i| (corpus.clusters[i], &corpus.examples[i])).collect()
    };
    let centroid_transfer = match (&models.gan, &models.text_standard) {
        (Some(gan), Some(text)) if !train.is_empty() => Some(centroid_transfer(
            &models.spec_vae,
            text,
            gan,
            &labeled(train),
            &labeled(heldout),
        )?),
        _ => None,
    };
    let mut modes = BTreeMap::new();
    for mode in models.available_modes() {
        let set = generate_for_heldout(models, corpus, heldout, mode, opts, seed)?;
        let mse = (mode == Mode::Gan).then(|| alignment.map(|a| a.latent_mse)).flatten();
        modes.insert(mode, ModeMetrics::from_set(&set, &corpus.pools, mse));
    }
    Ok(EvalReport {
        corpus: format!(
            "synthetic: {} clusters, {} pairs, {} held out",
            corpus.pools.len(),
            corpus.examples.len(),
            heldout.len()
        ),
        seeds: vec![seed],
        alignment,
        centroid_transfer,
        modes,
    })
}

/// One row of the side-by-side comparison; `None` marks an unavailable mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub clip_id: String,
    pub cells: BTreeMap<Mode, Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    /// Tab-separated, with a header row and `unavailable` for missing modes.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("clip_id");
        for m in Mode::ALL {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.clip_id);
            for m in Mode::ALL {
                let cell = row.cells.get(&m).cloned().flatten();
                let _ = write!(out, "\t{}", cell.as_deref().unwrap_or("unavailable"));
            }
            out.push('\n');
        }
        out
    }
}

/// Top-ranked line of every clip in every mode, all modes sharing the clip's seed.
pub fn compare_modes(
    models: &Models,
    clips: &[(String, MelSpectrogram)],
    opts: &GenerationOptions,
    seed: u64,
) -> Result<ComparisonTable> {
    let opts = GenerationOptions { k: 1, ..*opts };
    let mut rows = Vec::with_capacity(clips.len());
    for (i, (clip_id, spec)) in clips.iter().enumerate() {
        let mut cells = BTreeMap::new();
        for mode in Mode::ALL {
            let cell = if models.check_mode(mode).is_ok() {
                let lines = service::generate_lines(models, spec, mode, &opts, seed.wrapping_add(i as u64))?;
                Some(lines.into_iter().next().map(|l| l.text).unwrap_or_default())
            } else {
                None
            };
            cells.insert(mode, cell);
        }
        rows.push(ComparisonRow {
            clip_id: clip_id.clone(),
            cells,
        });
    }
    rows.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn distinct_boundaries() {
        assert_eq!(distinct_n(&[toks("a b c"), toks("d e")], 1), 1.0);
        assert_eq!(distinct_n(&[toks("a a"), toks("a a")], 1), 0.25);
        assert_eq!(distinct_n(&[toks("a")], 2), 0.0);
        let same: Vec<Vec<String>> = (0..10).map(|_| toks("x y")).collect();
        assert!((distinct_n(&same, 2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn purity_counts_pool_membership() {
        let pools = vec![toks("sun sky"), toks("rain mud")];
        assert_eq!(purity(&[(0, toks("sun sky sun"))], &pools), 1.0);
        assert_eq!(purity(&[(1, toks("sun rain"))], &pools), 0.5);
        assert_eq!(purity::<String>(&[], &pools), 0.0);
    }

    #[test]
    fn failures_flag_missed_thresholds() {
        let metrics = |p| ModeMetrics {
            latent_mse: None,
            cluster_purity: p,
            distinct_1: 1.0,
            distinct_2: 1.0,
            mean_line_len: 3.0,
        };
        let mut report = EvalReport {
            corpus: "x".into(),
            seeds: vec![1],
            alignment: Some(AlignmentReport {
                latent_mse: 1.0,
                untrained_latent_mse: 4.0,
            }),
            centroid_transfer: Some(vec![0.9, 1.0]),
            modes: BTreeMap::from([(Mode::Topology, metrics(0.9)), (Mode::Baseline, metrics(0.5))]),
        };
        assert!(report.failures(&EvalThresholds::default()).is_empty());
        report.modes.insert(Mode::Baseline, metrics(0.8));
        assert_eq!(report.failures(&EvalThresholds::default()).len(), 1);
        let table = report.to_table();
        assert!(table.contains("cluster_purity"));
        assert!(table.contains("topology"));
    }

    #[test]
    fn columns_align() {
        let rows = vec![
            vec!["a".to_string(), "bb".into()],
            vec!["ccc".to_string(), "d".into()],
        ];
        assert_eq!(align_columns(&rows), "a    bb\nccc  d\n");
    }
}
