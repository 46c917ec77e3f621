//! JSON messages exchanged with streaming clients.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::service::{GenerationResult, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        session: String,
        mode: Mode,
        sample_rate: u32,
        channels: u16,
    },
    Audio {
        seq: u64,
        /// Base64 of 16-bit little-endian interleaved PCM.
        payload: String,
    },
    /// End of the jam: the partial window is padded and processed.
    Flush,
}

/// `lines` carries a [`GenerationResult`]; its `latency_ms` field is an
/// addition clients may ignore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Lines(GenerationResult),
    Error { code: String, message: String },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.as_str().into(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    BadMessage,
    NoSession,
    SessionExists,
    Format,
    Sequence,
    Config,
    Pipeline,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadMessage => "bad_message",
            ErrorCode::NoSession => "no_session",
            ErrorCode::SessionExists => "session_exists",
            ErrorCode::Format => "format",
            ErrorCode::Sequence => "sequence",
            ErrorCode::Config => "config",
            ErrorCode::Pipeline => "pipeline",
        }
    }
}

pub fn parse_client(text: &str) -> Result<ClientMessage> {
    serde_json::from_str(text).map_err(|e| Error::Protocol(e.to_string()))
}

pub fn encode_payload(pcm_le: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(pcm_le)
}

pub fn decode_payload(payload: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| Error::Protocol(format!("payload is not base64: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::RankedLine;

    #[test]
    fn client_messages_match_wire_shape() {
        let hello = parse_client(
            r#"{"type":"hello","session":"s1","mode":"topology","sample_rate":44100,"channels":2}"#,
        )
        .unwrap();
        assert_eq!(
            hello,
            ClientMessage::Hello {
                session: "s1".into(),
                mode: Mode::Topology,
                sample_rate: 44100,
                channels: 2
            }
        );
        assert_eq!(parse_client(r#"{"type":"flush"}"#).unwrap(), ClientMessage::Flush);
        let audio = parse_client(r#"{"type":"audio","seq":3,"payload":"AQA="}"#).unwrap();
        let ClientMessage::Audio { seq, payload } = audio else { panic!() };
        assert_eq!(seq, 3);
        assert_eq!(decode_payload(&payload).unwrap(), vec![1, 0]);
        assert!(parse_client(r#"{"type":"hello","session":"s","mode":"loud","sample_rate":1,"channels":1}"#).is_err());
        assert!(parse_client("not json").is_err());
    }

    #[test]
    fn lines_message_shape() {
        let result = GenerationResult {
            clip_id: "s-00000".into(),
            timestamp: "2026-01-02T03:04:05.678Z".parse().unwrap(),
            lines: vec![RankedLine {
                text: "hello".into(),
                score: -1.5,
                rank: 1,
            }],
            mode: Mode::Gan,
            latency_ms: 12.0,
        };
        let json = ServerMessage::Lines(result.clone()).to_json();
        assert_eq!(
            json,
            r#"{"type":"lines","clip_id":"s-00000","timestamp":"2026-01-02T03:04:05.678Z","lines":[{"text":"hello","score":-1.5,"rank":1}],"mode":"gan","latency_ms":12.0}"#
        );
        let back: ServerMessage = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ServerMessage::Lines(result));
        assert_eq!(
            ServerMessage::error(ErrorCode::Format, "odd").to_json(),
            r#"{"type":"error","code":"format","message":"odd"}"#
        );
    }
}
