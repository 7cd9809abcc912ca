//! Dataset plumbing: binary labels, JSON-lines manifests, strict 16-bit
//! mono WAV I/O and the synthetic keyword corpus.

mod corpus;
mod manifest;
mod wav;

pub use corpus::{
    generate_toy_corpus, render_utterance, synthesize_keyword, CorpusSpec, GeneratedUtterance, NegativeKind,
    NegativeStream, SyntheticVoice, UtteranceContent,
};
pub use manifest::{load_manifest, load_mobvoi, write_manifest, Manifest, ManifestRecord};
pub use wav::{read_wav, write_wav, write_wav_chunks, Audio, WavChunks, SAMPLE_RATE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Wav { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("invalid corpus request: {0}")]
    Corpus(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Binary utterance label; serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}
