//! Time and frequency masking for the first training epochs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    /// Masking applies to epochs `1..=active_epochs`.
    pub active_epochs: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            time_mask_max: 30,
            freq_mask_max: 20,
            active_epochs: 5,
        }
    }
}

/// A zeroed band of `len` consecutive rows or columns starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AppliedMasks {
    pub time: Option<Mask>,
    pub freq: Option<Mask>,
}

fn draw(rng: &mut impl Rng, max: usize, extent: usize) -> Mask {
    let len = rng.gen_range(0..=max).min(extent);
    let start = rng.gen_range(0..=extent - len);
    Mask { start, len }
}

pub fn mask_time(spec: &mut Spectrogram, m: Mask) {
    let frames = spec.frames();
    for row in spec.values_mut().chunks_mut(frames) {
        row[m.start..m.start + m.len].fill(0.0);
    }
}

pub fn mask_freq(spec: &mut Spectrogram, m: Mask) {
    let frames = spec.frames();
    spec.values_mut()[m.start * frames..(m.start + m.len) * frames].fill(0.0);
}

/// Masks a batch in place. The first `n/3` items get a time mask only, the
/// next `n/3` a frequency mask only and the rest both. Later epochs are left
/// untouched.
pub fn augment_batch(
    batch: &mut [Spectrogram],
    epoch: usize,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Vec<AppliedMasks> {
    if epoch > policy.active_epochs {
        return vec![AppliedMasks::default(); batch.len()];
    }
    let third = batch.len() / 3;
    batch
        .iter_mut()
        .enumerate()
        .map(|(i, spec)| {
            let (time, freq) = match i / third.max(1) {
                _ if third == 0 => (true, true),
                0 => (true, false),
                1 => (false, true),
                _ => (true, true),
            };
            let mut applied = AppliedMasks::default();
            if time {
                let m = draw(rng, policy.time_mask_max, spec.frames());
                mask_time(spec, m);
                applied.time = Some(m);
            }
            if freq {
                let m = draw(rng, policy.freq_mask_max, spec.bands());
                mask_freq(spec, m);
                applied.freq = Some(m);
            }
            applied
        })
        .collect()
}
