//! WebSocket front end: one session per connection, drop-oldest backpressure.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use crate::audio::{self, AudioClip, Segmenter};
use crate::error::{Error, Result};
use crate::protocol::{self, ClientMessage, ErrorCode, ServerMessage};
use crate::ranker::{RankerKind, RankerSpec};
use crate::service::{ClipPipeline, GenerationOptions, Mode, SessionCore, SessionStore, WINDOW_SECONDS};

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "LYRICJAM_DATA_DIR";

/// Flat JSON server configuration. Relative paths resolve against `data_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    pub k: usize,
    pub n_candidates: usize,
    pub mode: Mode,
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub ranker: RankerKind,
    pub ranker_checkpoint: Option<PathBuf>,
    /// Server seed; session and clip seeds derive from it.
    pub seed: u64,
    pub latent_temperature: f64,
    pub decode_temperature: f64,
    pub top_m: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let opts = GenerationOptions::default();
        Self {
            port: 8765,
            k: opts.k,
            n_candidates: opts.n,
            mode: Mode::Topology,
            data_dir: PathBuf::from("lyricjam-data"),
            model_dir: PathBuf::from("models"),
            ranker: RankerKind::Likelihood,
            ranker_checkpoint: None,
            seed: 0,
            latent_temperature: opts.latent_temperature,
            decode_temperature: opts.decode_temperature,
            top_m: opts.top_m,
        }
    }
}

impl ServerConfig {
    /// Reads a config file, then applies the data-directory environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg.with_env())
    }

    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            self.data_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.options().validate()?;
        self.ranker_spec().validate()
    }

    pub fn options(&self) -> GenerationOptions {
        GenerationOptions {
            n: self.n_candidates,
            k: self.k,
            latent_temperature: self.latent_temperature,
            decode_temperature: self.decode_temperature,
            top_m: self.top_m,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.resolve(&self.model_dir)
    }

    pub fn ranker_spec(&self) -> RankerSpec {
        RankerSpec {
            kind: self.ranker,
            checkpoint: self.ranker_checkpoint.as_deref().map(|p| self.resolve(p)),
        }
    }
}

/// Single-item mailbox: offering while full replaces (drops) the older item.
pub struct LatestSlot<T> {
    state: Mutex<(Option<T>, bool)>,
    notify: Notify,
    dropped: AtomicU64,
}

impl<T> Default for LatestSlot<T> {
    fn default() -> Self {
        Self {
            state: Mutex::new((None, false)),
            notify: Notify::new(),
            dropped: AtomicU64::new(0),
        }
    }
}

impl<T> LatestSlot<T> {
    /// Returns `true` when an older pending item was dropped.
    pub fn offer(&self, item: T) -> bool {
        let replaced = self.state.lock().expect("slot lock").0.replace(item).is_some();
        if replaced {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        self.notify.notify_one();
        replaced
    }

    /// No more offers; `take` drains the pending item, then yields `None`.
    pub fn close(&self) {
        self.state.lock().expect("slot lock").1 = true;
        self.notify.notify_one();
    }

    pub async fn take(&self) -> Option<T> {
        loop {
            {
                let mut s = self.state.lock().expect("slot lock");
                if let Some(item) = s.0.take() {
                    return Some(item);
                }
                if s.1 {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub dropped_windows: AtomicU64,
    pub results_sent: AtomicU64,
    pub pipeline_errors: AtomicU64,
}

struct Inner {
    pipeline: Arc<dyn ClipPipeline>,
    store: SessionStore,
    seed: u64,
    stats: Arc<ServerStats>,
}

pub struct Server {
    inner: Arc<Inner>,
}

/// A server accepting connections in the background.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub stats: Arc<ServerStats>,
    pub task: JoinHandle<()>,
}

impl Server {
    pub fn new(pipeline: Arc<dyn ClipPipeline>, store: SessionStore, seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                pipeline,
                store,
                seed,
                stats: Arc::new(ServerStats::default()),
            }),
        }
    }

    pub fn stats(&self) -> Arc<ServerStats> {
        self.inner.stats.clone()
    }

    /// Binds `addr` (port 0 picks a free port) and serves until the task is aborted.
    pub async fn spawn(self, addr: SocketAddr) -> Result<RunningServer> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let stats = self.stats();
        let task = tokio::spawn(self.serve(listener));
        Ok(RunningServer { addr, stats, task })
    }

    pub async fn serve(self, listener: TcpListener) {
        loop {
            match listener.accept().await {
                Ok((stream, peer)) => {
                    let inner = self.inner.clone();
                    tokio::spawn(async move {
                        if let Err(e) = handle_connection(inner, stream).await {
                            tracing::warn!(%peer, "connection ended with error: {e}");
                        }
                    });
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            }
        }
    }
}

struct LiveSession {
    id: String,
    segmenter: Segmenter,
    next_index: u64,
    last_seq: Option<u64>,
    slot: Arc<LatestSlot<(u64, AudioClip)>>,
    worker: JoinHandle<()>,
}

impl LiveSession {
    fn enqueue(&mut self, clips: Vec<AudioClip>, stats: &ServerStats) {
        for clip in clips {
            let index = self.next_index;
            self.next_index += 1;
            if self.slot.offer((index, clip)) {
                stats.dropped_windows.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(session = %self.id, index, "generation busy, dropped older window");
            }
        }
    }
}

async fn handle_connection(inner: Arc<Inner>, stream: TcpStream) -> Result<()> {
    let ws = tokio_tungstenite::accept_async(stream)
        .await
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut live: Option<LiveSession> = None;
    while let Some(msg) = source.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Binary(_)) => {
                send_error(&out_tx, ErrorCode::BadMessage, "binary frames are not accepted");
                continue;
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        let parsed = match protocol::parse_client(&text) {
            Ok(m) => m,
            Err(e) => {
                send_error(&out_tx, ErrorCode::BadMessage, e.to_string());
                continue;
            }
        };
        handle_message(&inner, &mut live, parsed, &out_tx);
    }

    if let Some(session) = live {
        session.slot.close();
        let _ = session.worker.await;
    }
    drop(out_tx);
    let _ = writer.await;
    Ok(())
}

fn send_error(out: &mpsc::UnboundedSender<String>, code: ErrorCode, message: impl Into<String>) {
    let _ = out.send(ServerMessage::error(code, message).to_json());
}

fn handle_message(
    inner: &Arc<Inner>,
    live: &mut Option<LiveSession>,
    msg: ClientMessage,
    out: &mpsc::UnboundedSender<String>,
) {
    match msg {
        ClientMessage::Hello {
            session,
            mode,
            sample_rate,
            channels,
        } => {
            if live.is_some() {
                return send_error(out, ErrorCode::BadMessage, "session already started on this connection");
            }
            if let Err(e) = inner.pipeline.check_mode(mode) {
                return send_error(out, ErrorCode::Config, e.to_string());
            }
            let segmenter = match Segmenter::new(sample_rate, channels, WINDOW_SECONDS) {
                Ok(s) => s,
                Err(e) => return send_error(out, ErrorCode::Format, e.to_string()),
            };
            let core = match SessionCore::open(&inner.store, &session, mode, inner.seed) {
                Ok(c) => c,
                Err(Error::Session(m)) if m.contains("already exists") => {
                    return send_error(out, ErrorCode::SessionExists, m)
                }
                Err(e) => return send_error(out, ErrorCode::BadMessage, e.to_string()),
            };
            tracing::info!(session = %session, %mode, sample_rate, channels, "session opened");
            let slot = Arc::new(LatestSlot::default());
            let worker = tokio::spawn(run_worker(inner.clone(), core, slot.clone(), out.clone()));
            *live = Some(LiveSession {
                id: session,
                segmenter,
                next_index: 0,
                last_seq: None,
                slot,
                worker,
            });
        }
        ClientMessage::Audio { seq, payload } => {
            let Some(session) = live.as_mut() else {
                return send_error(out, ErrorCode::NoSession, "send hello first");
            };
            if session.last_seq.is_some_and(|last| seq <= last) {
                return send_error(out, ErrorCode::Sequence, format!("seq {seq} is not increasing"));
            }
            session.last_seq = Some(seq);
            let bytes = match protocol::decode_payload(&payload) {
                Ok(b) => b,
                Err(e) => return send_error(out, ErrorCode::BadMessage, e.to_string()),
            };
            let clips = audio::pcm_from_le_bytes(&bytes).and_then(|s| session.segmenter.push_interleaved(&s));
            match clips {
                Ok(clips) => session.enqueue(clips, &inner.stats),
                Err(e) => send_error(out, ErrorCode::Format, e.to_string()),
            }
        }
        ClientMessage::Flush => {
            let Some(session) = live.as_mut() else {
                return send_error(out, ErrorCode::NoSession, "send hello first");
            };
            let clips = session.segmenter.flush().into_iter().collect();
            session.enqueue(clips, &inner.stats);
        }
    }
}

/// Generates windows one at a time. Each result is persisted before it is sent.
async fn run_worker(
    inner: Arc<Inner>,
    mut core: SessionCore,
    slot: Arc<LatestSlot<(u64, AudioClip)>>,
    out: mpsc::UnboundedSender<String>,
) {
    while let Some((index, clip)) = slot.take().await {
        let pipeline = inner.pipeline.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let outcome = core.process(pipeline.as_ref(), &clip, index);
            (core, outcome)
        })
        .await;
        let outcome;
        (core, outcome) = match joined {
            Ok(pair) => pair,
            Err(e) => {
                tracing::error!("generation task panicked: {e}");
                return;
            }
        };
        match outcome {
            Ok((_, wire)) => {
                inner.stats.results_sent.fetch_add(1, Ordering::Relaxed);
                let _ = out.send(wire);
            }
            Err(e) => {
                inner.stats.pipeline_errors.fetch_add(1, Ordering::Relaxed);
                tracing::error!(session = %core.id, index, "generation failed: {e}");
                send_error(&out, ErrorCode::Pipeline, e.to_string());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn slot_drops_oldest_and_drains_on_close() {
        let slot = LatestSlot::default();
        assert!(!slot.offer(1));
        assert!(slot.offer(2));
        assert_eq!(slot.dropped(), 1);
        assert_eq!(slot.take().await, Some(2));
        slot.offer(3);
        slot.close();
        assert_eq!(slot.take().await, Some(3));
        assert_eq!(slot.take().await, None);
    }

    #[test]
    fn config_is_flat_json_with_defaults() {
        let cfg: ServerConfig = serde_json::from_str(r#"{"port": 9000, "k": 3}"#).unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.n_candidates, 100);
        assert!(cfg.validate().is_ok());
        assert!(serde_json::from_str::<ServerConfig>(r#"{"nested": {}}"#).is_err());
        let bad = ServerConfig {
            k: 0,
            ..ServerConfig::default()
        };
        assert!(bad.validate().is_err());
        let rel = ServerConfig {
            data_dir: "/data".into(),
            ..ServerConfig::default()
        };
        assert_eq!(rel.model_path(), PathBuf::from("/data/models"));
    }
}
