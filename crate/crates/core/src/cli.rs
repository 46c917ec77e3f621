//! The `lyricjam` command line.
//!
//! Everything lives under one data directory: the corpus in `corpus/`, models in
//! `models/` and session logs in `sessions/`. The directory comes from
//! `--data-dir`, else from `LYRICJAM_DATA_DIR`, else `lyricjam-data`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Segmenter};
use crate::corpus::{self, LoadedCorpus, PairedExample, SyntheticConfig, VocabSource, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, EvalThresholds};
use crate::gan::{self, GanConfig};
use crate::server::{Server, ServerConfig, DATA_DIR_ENV};
use crate::service::{self, layout, GenerationOptions, ModelPipeline, Mode, Models, SessionStore};
use crate::spec_vae::{self, SpecVae, SpecVaeConfig};
use crate::text_cvae::{self, PriorMode, TextCvae, TextCvaeConfig};

pub const DEFAULT_DATA_DIR: &str = "lyricjam-data";
const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "lyricjam", version, about = "Lyric lines generated from live instrumental audio")]
pub struct Cli {
    /// Data directory (default: $LYRICJAM_DATA_DIR, then ./lyricjam-data).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered corpus (WAV clips plus manifest) to <data>/corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = crate::desk::DESK_PAIRS)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the spectrogram VAE; also fixes the vocabulary and the held-out split.
    TrainSpecVae {
        /// Flat JSON overriding spec-VAE config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of clips held out for evaluation.
        #[arg(long, default_value_t = 0.1)]
        heldout: f64,
    },
    /// Train a text CVAE with the standard-normal or the audio-posterior prior.
    TrainTextCvae {
        #[arg(long, value_parser = ["standard", "spec"])]
        prior: String,
        /// Flat JSON overriding text-CVAE config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the latent aligner against the standard-prior text model.
    TrainGan {
        /// Flat JSON overriding GAN config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print ranked lines for every 10-second window of a WAV file.
    Generate {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long, default_value = "topology")]
        mode: Mode,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Server config; supplies the model directory, ranker and temperatures.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the streaming WebSocket server.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Proxy metrics on the held-out synthetic clips; exits 1 when a threshold is missed.
    Eval {
        /// Flat JSON overriding threshold fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Held-out clip ids written by `train-spec-vae` and read by every later stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub heldout_fraction: f64,
    pub heldout: Vec<String>,
}

impl Split {
    /// `(train, heldout)` indices of `examples`.
    pub fn indices(&self, examples: &[PairedExample]) -> (Vec<usize>, Vec<usize>) {
        let held: std::collections::HashSet<&str> = self.heldout.iter().map(String::as_str).collect();
        (0..examples.len()).partition(|&i| !held.contains(examples[i].clip_id.as_str()))
    }
}

/// Resolves the data directory: flag, then environment, then default.
pub fn data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

pub fn corpus_dir(data: &Path) -> PathBuf {
    data.join("corpus")
}

pub fn model_dir(data: &Path) -> PathBuf {
    data.join("models")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays the keys of a flat JSON object file onto `base`; unknown keys are errors.
pub fn overlay_config<T: Serialize + DeserializeOwned>(base: T, path: &Path) -> Result<T> {
    let serde_json::Value::Object(mut fields) = serde_json::to_value(base)? else {
        return Err(Error::Config("config type is not a JSON object".into()));
    };
    let patch: serde_json::Map<String, serde_json::Value> = read_json(path)?;
    for (key, value) in patch {
        if !fields.contains_key(&key) {
            return Err(Error::Config(format!("{}: unknown field {key:?}", path.display())));
        }
        fields.insert(key, value);
    }
    serde_json::from_value(serde_json::Value::Object(fields))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_training_corpus(data: &Path, spec: &SpecVae) -> Result<(LoadedCorpus, Vec<PairedExample>)> {
    let models = model_dir(data);
    let vocab = Vocabulary::load(&models.join(layout::VOCAB))?;
    let loaded = corpus::load_manifest(
        &corpus_dir(data).join("manifest.tsv"),
        &spec.config().spectrogram,
        VocabSource::Fixed(vocab),
    )?;
    let split: Split = read_json(&models.join(SPLIT_FILE))?;
    let (train, _) = split.indices(&loaded.examples);
    let examples = train.iter().map(|&i| loaded.examples[i].clone()).collect();
    Ok((loaded, examples))
}

pub fn synth_corpus(data: &Path, clusters: usize, pairs: usize, seed: u64) -> Result<PathBuf> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(clusters, pairs, seed))?;
    corpus::write_synthetic_corpus(&corpus, &corpus_dir(data))
}

pub fn train_spec_vae(data: &Path, cfg: SpecVaeConfig, heldout: f64) -> Result<spec_vae::SpecVaeTraining> {
    let loaded = corpus::load_manifest(
        &corpus_dir(data).join("manifest.tsv"),
        &cfg.spectrogram,
        VocabSource::Build { min_count: 1 },
    )?;
    let (train, held) = corpus::split_by_clip(&loaded.examples, heldout, cfg.seed);
    let models = model_dir(data);
    std::fs::create_dir_all(&models)?;
    let mut held_ids: Vec<String> = held.iter().map(|&i| loaded.examples[i].clip_id.clone()).collect();
    held_ids.dedup();
    write_json(
        &models.join(SPLIT_FILE),
        &Split {
            seed: cfg.seed,
            heldout_fraction: heldout,
            heldout: held_ids,
        },
    )?;
    loaded.vocab.save(&models.join(layout::VOCAB))?;
    // One spectrogram per clip, even when a clip has several lines.
    let mut seen = std::collections::HashSet::new();
    let specs: Vec<&audio::MelSpectrogram> = train
        .iter()
        .map(|&i| &loaded.examples[i])
        .filter(|e| seen.insert(e.clip_id.as_str()))
        .map(|e| e.spectrogram.as_ref())
        .collect();
    let run = spec_vae::train(&specs, cfg)?;
    run.model.save(&models)?;
    run.epochs.write_csv(&models.join("spec_vae_epochs.csv"))?;
    Ok(run)
}

pub fn train_text_cvae(data: &Path, cfg: TextCvaeConfig) -> Result<text_cvae::TextCvaeTraining> {
    let models = model_dir(data);
    let spec = SpecVae::load(&models)?;
    let (_, train) = load_training_corpus(data, &spec)?;
    let stem = match cfg.prior_mode {
        PriorMode::Standard => layout::TEXT_STANDARD,
        PriorMode::SpecPosterior => layout::TEXT_SPEC,
    };
    let run = text_cvae::train(&train, &spec, cfg)?;
    run.model.save(&models, stem)?;
    run.steps.write_csv(&models.join(format!("{stem}_steps.csv")))?;
    Ok(run)
}

pub fn train_gan(data: &Path, cfg: GanConfig) -> Result<gan::GanTraining> {
    let models = model_dir(data);
    let spec = SpecVae::load(&models)?;
    let text = TextCvae::load(&models, layout::TEXT_STANDARD)?;
    let (_, train) = load_training_corpus(data, &spec)?;
    let run = gan::train_gan(&train, &spec, &text, cfg)?;
    run.model.save(&models)?;
    run.steps.write_csv(&models.join("gan_steps.csv"))?;
    Ok(run)
}

/// Ranked lines for each 10-second window of `wav`, the last one zero-padded.
/// Window `i` uses seed `clip_seed(seed, i)`. The output has no timings, so it is
/// byte-identical across runs.
pub fn generate_text(models: &Models, wav: &[u8], mode: Mode, opts: &GenerationOptions, seed: u64) -> Result<String> {
    let clip = audio::decode_wav(wav)?;
    let mut seg = Segmenter::new(clip.sample_rate(), clip.channels(), service::WINDOW_SECONDS)?;
    let mut windows = seg.push(&clip)?;
    windows.extend(seg.flush());
    let mut out = String::new();
    for (i, window) in windows.iter().enumerate() {
        let spec = audio::to_mel_spectrogram(window, models.spectrogram_params())?;
        let lines = service::generate_lines(models, &spec, mode, opts, service::clip_seed(seed, i as u64))?;
        out.push_str(&format!("# window {i} ({mode})\n"));
        for l in lines {
            out.push_str(&format!("{}\t{:.6}\t{}\n", l.rank, l.score, l.text));
        }
    }
    Ok(out)
}

fn server_config(path: Option<&Path>, data: &Path, data_flag: bool) -> Result<ServerConfig> {
    let mut cfg = match path {
        Some(p) => ServerConfig::load(p)?,
        None => ServerConfig {
            data_dir: data.to_path_buf(),
            ..ServerConfig::default()
        },
    };
    if data_flag {
        cfg.data_dir = data.to_path_buf();
    }
    Ok(cfg)
}

/// Report plus missed thresholds over the held-out split of the synthetic corpus.
pub fn run_eval(
    data: &Path,
    thresholds: &EvalThresholds,
    opts: &GenerationOptions,
    seed: u64,
) -> Result<(eval::EvalReport, Vec<String>)> {
    let dir = model_dir(data);
    let models = Models::load(&dir, &crate::ranker::RankerSpec::likelihood())?;
    let corpus = corpus::read_synthetic_corpus(
        &corpus_dir(data),
        models.spectrogram_params(),
        VocabSource::Fixed(models.vocab.clone()),
    )?;
    let split: Split = read_json(&dir.join(SPLIT_FILE))?;
    let (train, heldout) = split.indices(&corpus.examples);
    let report = eval::evaluate(&models, &corpus, &train, &heldout, opts, seed)?;
    let failures = report.failures(thresholds);
    Ok((report, failures))
}

fn override_some<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Runs a parsed command; the exit code is 1 for missed eval thresholds and 2 for errors.
pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let data_flag = cli.data_dir.is_some();
    let data = data_dir(cli.data_dir.as_deref());
    match cli.command {
        Command::SynthCorpus { clusters, pairs, seed } => {
            let manifest = synth_corpus(&data, clusters, pairs, seed)?;
            println!("wrote {}", manifest.display());
        }
        Command::TrainSpecVae {
            config,
            epochs,
            seed,
            heldout,
        } => {
            let mut cfg = SpecVaeConfig::desk(crate::desk::DeskConfig::default().latent_dim);
            if let Some(p) = config {
                cfg = overlay_config(cfg, &p)?;
            }
            override_some(&mut cfg.epochs, epochs);
            override_some(&mut cfg.seed, seed);
            let run = train_spec_vae(&data, cfg, heldout)?;
            if let (Some(first), Some(last)) = (run.epochs.rows().first(), run.epochs.rows().last()) {
                println!("spec-VAE total loss {:.3} -> {:.3}", first[2], last[2]);
            }
        }
        Command::TrainTextCvae {
            prior,
            config,
            epochs,
            seed,
        } => {
            let prior: PriorMode = prior.parse()?;
            let vocab = Vocabulary::load(&model_dir(&data).join(layout::VOCAB))?;
            let spec = SpecVae::load(&model_dir(&data))?;
            let mut cfg = TextCvaeConfig::desk(vocab.len(), spec.latent_dim(), prior);
            if let Some(p) = config {
                cfg = overlay_config(cfg, &p)?;
            }
            cfg.prior_mode = prior;
            override_some(&mut cfg.epochs, epochs);
            override_some(&mut cfg.seed, seed);
            let run = train_text_cvae(&data, cfg)?;
            if let Some(last) = run.steps.rows().last() {
                println!("text-CVAE final reconstruction {:.3}, kl {:.3}", last[0], last[1]);
            }
        }
        Command::TrainGan { config, epochs, seed } => {
            let mut cfg = GanConfig::new(SpecVae::load(&model_dir(&data))?.latent_dim());
            if let Some(p) = config {
                cfg = overlay_config(cfg, &p)?;
            }
            override_some(&mut cfg.epochs, epochs);
            override_some(&mut cfg.seed, seed);
            let run = train_gan(&data, cfg)?;
            println!("GAN epoch mse: {:?}", run.epoch_mse);
        }
        Command::Generate {
            wav,
            mode,
            n,
            k,
            seed,
            config,
        } => {
            let cfg = server_config(config.as_deref(), &data, data_flag)?;
            let opts = GenerationOptions { n, k, ..cfg.options() };
            let models = Models::load(&cfg.model_path(), &cfg.ranker_spec())?;
            print!("{}", generate_text(&models, &std::fs::read(&wav)?, mode, &opts, seed)?);
        }
        Command::Serve { port, config } => {
            let mut cfg = server_config(config.as_deref(), &data, data_flag)?;
            override_some(&mut cfg.port, port);
            cfg.validate()?;
            let models = Arc::new(Models::load(&cfg.model_path(), &cfg.ranker_spec())?);
            let pipeline = Arc::new(ModelPipeline::new(models, cfg.options())?);
            let store = SessionStore::new(&cfg.data_dir)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let server = Server::new(pipeline, store, cfg.seed);
                let running = server.spawn(SocketAddr::from(([0, 0, 0, 0], cfg.port))).await?;
                tracing::info!(addr = %running.addr, "listening");
                println!("listening on ws://{}", running.addr);
                running
                    .task
                    .await
                    .map_err(|e| Error::Protocol(format!("server task failed: {e}")))
            })?;
        }
        Command::Eval { config, n, k, seed } => {
            let thresholds = match config {
                Some(p) => overlay_config(EvalThresholds::default(), &p)?,
                None => EvalThresholds::default(),
            };
            let opts = GenerationOptions {
                n,
                k,
                ..GenerationOptions::default()
            };
            let (report, failures) = run_eval(&data, &thresholds, &opts, seed)?;
            write_json(&data.join("eval_report.json"), &report)?;
            print!("{}", report.to_table());
            if !failures.is_empty() {
                for f in &failures {
                    println!("missed: {f}");
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
