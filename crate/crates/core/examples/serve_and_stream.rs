//! Runs the WebSocket server and streams 30 seconds of audio to it from a scripted client.

use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use lyricjam::audio;
use lyricjam::corpus::{self, SyntheticConfig};
use lyricjam::desk::{self, DeskConfig};
use lyricjam::protocol::{self, ClientMessage, ServerMessage};
use lyricjam::server::Server;
use lyricjam::service::{GenerationOptions, ModelPipeline, Mode, SessionStore};
use tokio_tungstenite::tungstenite::Message;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let corpus = corpus::make_synthetic_corpus(&SyntheticConfig::new(2, 40, 0))?;
    let models = Arc::new(desk::train_all(&corpus, &DeskConfig::quick(0))?.models);
    let data = tempfile::tempdir()?;
    let pipeline = Arc::new(ModelPipeline::new(models, GenerationOptions::default())?);
    let server = Server::new(pipeline, SessionStore::new(data.path())?, 1);
    let running = server.spawn("127.0.0.1:0".parse()?).await?;
    println!("server on {}", running.addr);

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}", running.addr)).await?;
    let send = |m: ClientMessage| Message::Text(serde_json::to_string(&m).expect("serializes"));
    ws.send(send(ClientMessage::Hello {
        session: "demo".into(),
        mode: Mode::Topology,
        sample_rate: 8_000,
        channels: 1,
    }))
    .await?;

    // Three 10 s windows of cluster audio, sent one second at a time.
    let mut seq = 0;
    for clip in corpus.clips.iter().take(3) {
        for second in clip.samples().chunks(8_000) {
            let payload = protocol::encode_payload(&audio::pcm_to_le_bytes(second));
            ws.send(send(ClientMessage::Audio { seq, payload })).await?;
            seq += 1;
        }
        // Wait for this window's lines before sending the next one.
        while let Some(msg) = ws.next().await {
            if let Message::Text(text) = msg? {
                match serde_json::from_str::<ServerMessage>(&text)? {
                    ServerMessage::Lines(r) => {
                        println!("{} {:.0} ms: {:?}", r.clip_id, r.latency_ms, r.lines.iter().map(|l| &l.text).collect::<Vec<_>>());
                        break;
                    }
                    ServerMessage::Error { code, message } => anyhow::bail!("{code}: {message}"),
                }
            }
        }
    }
    ws.close(None).await?;
    let log = std::fs::read_to_string(data.path().join("sessions/demo.jsonl"))?;
    println!("persisted {} records", log.lines().count());
    running.task.abort();
    Ok(())
}
