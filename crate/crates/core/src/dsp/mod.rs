//! Log-mel front end and the two spectrogram transforms fed to the
//! classifiers: time-axis bilinear resizing (global model) and sliding
//! window slicing (local model).

mod resize;
mod slicing;
mod stft;

pub use resize::{bilinear_kernel, bilinear_resize};
pub use slicing::{pad_frames, slice, slice_starts, Slice, SliceConfig, StepMode};
pub use stft::{stft_logmel, FeatureConfig, LogMelExtractor, StreamingFrontend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("audio has {got} samples, need at least one window of {need}")]
    TooShort { got: usize, need: usize },
    #[error("unsupported sample rate {got} Hz (expected {expected} Hz)")]
    SampleRate { got: u32, expected: u32 },
    #[error("spectrogram has {frames} frames, need at least {need}")]
    TooFewFrames { frames: usize, need: usize },
    #[error("band count mismatch: expected {expected}, got {got}")]
    Bands { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Log-mel energies stored band-major: `values[band * frames + frame]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    bands: usize,
    frames: usize,
    values: Vec<f32>,
    frame_period_s: f64,
}

impl Spectrogram {
    pub fn new(bands: usize, frames: usize, values: Vec<f32>, frame_period_s: f64) -> Result<Self, DspError> {
        if bands == 0 || frames == 0 {
            return Err(DspError::Config(format!("empty spectrogram {bands}x{frames}")));
        }
        if values.len() != bands * frames {
            return Err(DspError::Config(format!(
                "{bands}x{frames} spectrogram needs {} values, got {}",
                bands * frames,
                values.len()
            )));
        }
        if !(frame_period_s > 0.0) {
            return Err(DspError::Config(format!(
                "frame period must be positive, got {frame_period_s}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::Config("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            bands,
            frames,
            values,
            frame_period_s,
        })
    }

    pub fn filled(bands: usize, frames: usize, value: f32, frame_period_s: f64) -> Self {
        Self::new(bands, frames, vec![value; bands * frames], frame_period_s).expect("valid fill")
    }

    /// Builds a spectrogram from frame-major rows (`rows[t][band]`).
    pub fn from_frames(bands: usize, rows: &[f32], frame_period_s: f64) -> Result<Self, DspError> {
        if bands == 0 || !rows.len().is_multiple_of(bands) {
            return Err(DspError::Bands {
                expected: bands,
                got: rows.len(),
            });
        }
        let frames = rows.len() / bands;
        let mut values = vec![0.0f32; rows.len()];
        for (t, row) in rows.chunks(bands).enumerate() {
            for (b, &v) in row.iter().enumerate() {
                values[b * frames + t] = v;
            }
        }
        Self::new(bands, frames, values, frame_period_s)
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn frame_period_s(&self) -> f64 {
        self.frame_period_s
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 * self.frame_period_s
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.frames + frame]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.values[band * self.frames..(band + 1) * self.frames]
    }

    /// Column `frame` across all bands.
    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(b, frame)).collect()
    }

    /// Frames `[start, end)`.
    pub fn crop(&self, start: usize, end: usize) -> Result<Self, DspError> {
        if start >= end || end > self.frames {
            return Err(DspError::Config(format!(
                "crop [{start}, {end}) outside 0..{}",
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.bands * (end - start));
        for b in 0..self.bands {
            values.extend_from_slice(&self.band(b)[start..end]);
        }
        Ok(Self {
            bands: self.bands,
            frames: end - start,
            values,
            frame_period_s: self.frame_period_s,
        })
    }

    /// Appends the frames of `other` in time order.
    pub fn concat(&self, other: &Spectrogram) -> Result<Self, DspError> {
        if other.bands != self.bands {
            return Err(DspError::Bands {
                expected: self.bands,
                got: other.bands,
            });
        }
        let frames = self.frames + other.frames;
        let mut values = Vec::with_capacity(self.bands * frames);
        for b in 0..self.bands {
            values.extend_from_slice(self.band(b));
            values.extend_from_slice(other.band(b));
        }
        Ok(Self {
            bands: self.bands,
            frames,
            values,
            frame_period_s: self.frame_period_s,
        })
    }
}
