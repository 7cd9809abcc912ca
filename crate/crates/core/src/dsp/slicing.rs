use serde::{Deserialize, Serialize};

use super::{DspError, Spectrogram};
use crate::data::Label;

/// How `step_fraction` turns into a hop between windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// hop = W * s
    #[default]
    Step,
    /// hop = W * (1 - s), i.e. `s` is the overlap between windows
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub window_frames: usize,
    pub step_fraction: f64,
    pub step_mode: StepMode,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            window_frames: 100,
            step_fraction: 0.3,
            step_mode: StepMode::Step,
        }
    }
}

impl SliceConfig {
    pub fn new(window_frames: usize, step_fraction: f64) -> Result<Self, DspError> {
        let cfg = Self {
            window_frames,
            step_fraction,
            step_mode: StepMode::Step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_frames < 2 {
            return Err(DspError::Config(format!(
                "window must be >= 2 frames, got {}",
                self.window_frames
            )));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(DspError::Config(format!(
                "step fraction must lie in (0, 1), got {}",
                self.step_fraction
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        let frac = match self.step_mode {
            StepMode::Step => self.step_fraction,
            StepMode::Overlap => 1.0 - self.step_fraction,
        };
        ((self.window_frames as f64 * frac).round() as usize).max(1)
    }
}

/// One window of a sliced spectrogram, carrying its utterance's label.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub start_frame: usize,
    pub end_frame: usize,
    pub values: Spectrogram,
    pub inherited_label: Label,
}

/// Window starts `0, step, 2*step, ...` that fit, plus a final window
/// flush with the end when the grid does not land there.
pub fn slice_starts(frames: usize, cfg: &SliceConfig) -> Result<Vec<usize>, DspError> {
    cfg.validate()?;
    let w = cfg.window_frames;
    if frames < w {
        return Err(DspError::TooFewFrames { frames, need: w });
    }
    let step = cfg.step();
    let last = frames - w;
    let mut starts: Vec<usize> = (0..=last).step_by(step).collect();
    if *starts.last().expect("start 0 always fits") != last {
        starts.push(last);
    }
    Ok(starts)
}

pub fn slice(spec: &Spectrogram, cfg: &SliceConfig, label: Label) -> Result<Vec<Slice>, DspError> {
    slice_starts(spec.frames(), cfg)?
        .into_iter()
        .map(|start| {
            let end = start + cfg.window_frames;
            Ok(Slice {
                start_frame: start,
                end_frame: end,
                values: spec.crop(start, end)?,
                inherited_label: label,
            })
        })
        .collect()
}

/// Right-pads with `value` up to `min_frames`; longer inputs are returned as is.
pub fn pad_frames(spec: &Spectrogram, min_frames: usize, value: f32) -> Spectrogram {
    if spec.frames() >= min_frames {
        return spec.clone();
    }
    let pad = Spectrogram::filled(spec.bands(), min_frames - spec.frames(), value, spec.frame_period_s());
    spec.concat(&pad).expect("same band count")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize, s: f64) -> SliceConfig {
        SliceConfig::new(w, s).unwrap()
    }

    #[test]
    fn enumerates_with_tail() {
        assert_eq!(cfg(100, 0.3).step(), 30);
        assert_eq!(slice_starts(200, &cfg(100, 0.3)).unwrap(), [0, 30, 60, 90, 100]);
        assert_eq!(slice_starts(100, &cfg(100, 0.3)).unwrap(), [0]);
        assert_eq!(slice_starts(130, &cfg(100, 0.3)).unwrap(), [0, 30]);
        assert!(matches!(
            slice_starts(99, &cfg(100, 0.3)),
            Err(DspError::TooFewFrames { frames: 99, need: 100 })
        ));
    }

    #[test]
    fn overlap_mode_and_minimum_step() {
        let mut c = cfg(75, 0.3);
        assert_eq!(c.step(), 23);
        c.step_mode = StepMode::Overlap;
        assert_eq!(c.step(), 53);
        assert_eq!(cfg(2, 0.1).step(), 1);
        assert!(SliceConfig::new(1, 0.3).is_err());
        assert!(SliceConfig::new(10, 1.0).is_err());
    }

    #[test]
    fn slices_inherit_label_and_content() {
        let vals: Vec<f32> = (0..2 * 10).map(|v| v as f32).collect();
        let spec = Spectrogram::new(2, 10, vals, 0.01).unwrap();
        let s = slice(&spec, &cfg(4, 0.5), Label::Positive).unwrap();
        let starts: Vec<usize> = s.iter().map(|s| s.start_frame).collect();
        assert_eq!(starts, [0, 2, 4, 6]);
        assert!(s
            .iter()
            .all(|s| s.inherited_label == Label::Positive && s.end_frame - s.start_frame == 4));
        assert_eq!(s[1].values.band(1), [12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn padding() {
        let spec = Spectrogram::filled(3, 5, 1.0, 0.01);
        let p = pad_frames(&spec, 8, -23.0);
        assert_eq!(p.frames(), 8);
        assert_eq!(p.band(2), [1.0, 1.0, 1.0, 1.0, 1.0, -23.0, -23.0, -23.0]);
        assert_eq!(pad_frames(&spec, 3, 0.0), spec);
    }
}
