//! Audio-conditioned lyric line generation.
//!
//! A live audio stream is cut into 10-second clips, each clip becomes a
//! mel-spectrogram, a convolutional VAE encodes it, and a conditional
//! recurrent VAE decodes lyric lines from latent codes aligned with the audio
//! one. Two alignment strategies are provided: an adversarial mapping from
//! audio latents to text latents, and training the text model with the audio
//! posterior as its per-example prior. Candidate lines are ranked and the best
//! ones streamed back to the client.

pub mod audio;
pub mod cli;
pub mod corpus;
pub mod desk;
pub mod error;
pub mod eval;
pub mod gan;
pub mod latent;
pub mod nn;
pub mod protocol;
pub mod ranker;
pub mod server;
pub mod service;
pub mod spec_vae;
pub mod text_cvae;

pub use error::{Error, Result};
