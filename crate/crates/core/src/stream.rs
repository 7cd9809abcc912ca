//! Streaming two-stage detection.
//!
//! Every completed slice window is scored by the local model. A slice whose
//! score exceeds `threshold` is a trigger point. When a maximal run of at
//! least two consecutive trigger points closes, the global model scores the
//! frames from the first trigger slice's start to the last one's end
//! (resized), and an event fires if the average of the two scores clears the
//! final threshold. Runs starting inside the refractory window after an
//! event are discarded.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{bilinear_resize, pad_frames, slice_starts, DspError, SliceConfig, Spectrogram};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pushed frames have {got} bands, detector expects {expected}")]
    Bands { expected: usize, got: usize },
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("scorer returned {got} scores for {expected} inputs")]
    ScoreCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, StreamError>;

/// Positive-class probabilities for a batch of equally shaped inputs.
pub trait Scorer: Sync {
    fn score(&self, inputs: &[Spectrogram]) -> Result<Vec<f32>>;
}

impl Scorer for Model {
    fn score(&self, inputs: &[Spectrogram]) -> Result<Vec<f32>> {
        let Some(first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let (bands, frames) = (first.bands(), first.frames());
        let mut data = Vec::with_capacity(inputs.len() * bands * frames);
        for s in inputs {
            if s.bands() != bands || s.frames() != frames {
                return Err(StreamError::Config("scorer inputs differ in shape".into()));
            }
            data.extend_from_slice(s.values());
        }
        let x = Tensor::new([inputs.len(), 1, bands, frames], data).map_err(ModelError::from)?;
        Ok(self.predict(x)?)
    }
}

/// Adapts a per-input closure, mostly for stubs.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&Spectrogram) -> f32 + Sync> Scorer for FnScorer<F> {
    fn score(&self, inputs: &[Spectrogram]) -> Result<Vec<f32>> {
        Ok(inputs.iter().map(&self.0).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Trigger-point threshold on the local score.
    pub threshold: f32,
    /// Threshold on the averaged score; defaults to `threshold`.
    pub final_threshold: Option<f32>,
    pub slice: SliceConfig,
    pub resize_frames: usize,
    pub refractory_frames: usize,
    /// Value used to pad streams shorter than one window.
    pub pad_value: f32,
    /// Windows scored per call to the local model.
    pub score_batch: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            final_threshold: None,
            slice: SliceConfig::default(),
            resize_frames: 200,
            refractory_frames: 100,
            pad_value: (1e-10f64).ln() as f32,
            score_batch: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f32| v > 0.0 && v < 1.0;
        if !in_unit(self.threshold) {
            return Err(StreamError::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if let Some(f) = self.final_threshold {
            if !(0.0..1.0).contains(&f) {
                return Err(StreamError::Config(format!(
                    "final threshold must lie in [0, 1), got {f}"
                )));
            }
        }
        if self.resize_frames < 2 || self.score_batch == 0 {
            return Err(StreamError::Config(
                "resize_frames >= 2 and score_batch >= 1 required".into(),
            ));
        }
        self.slice.validate()?;
        Ok(())
    }

    pub fn effective_final_threshold(&self) -> f32 {
        self.final_threshold.unwrap_or(self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub span_start_frame: usize,
    pub span_end_frame: usize,
    pub y_m0: f32,
    pub y_m1: f32,
    pub y_f: f32,
}

/// The JSON-lines form of an event, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub start_s: f64,
    pub end_s: f64,
    pub y_m0: f32,
    pub y_m1: f32,
    pub y_f: f32,
}

impl DetectionEvent {
    pub fn record(&self, frame_period_s: f64) -> EventRecord {
        EventRecord {
            start_s: self.span_start_frame as f64 * frame_period_s,
            end_s: self.span_end_frame as f64 * frame_period_s,
            y_m0: self.y_m0,
            y_m1: self.y_m1,
            y_f: self.y_f,
        }
    }
}

/// A closed run of at least two trigger points, before the final decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub span_start_frame: usize,
    pub span_end_frame: usize,
    pub y_m1: f32,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    first_start: usize,
    last_end: usize,
    len: usize,
    best: f32,
}

/// Run bookkeeping plus the refractory rule, shared by the streaming and
/// offline paths.
#[derive(Debug, Clone)]
struct TriggerMachine {
    threshold: f32,
    final_threshold: f32,
    window: usize,
    refractory_frames: usize,
    run: Option<Run>,
    refractory_until: usize,
}

impl TriggerMachine {
    fn new(cfg: &DetectorConfig) -> Self {
        Self {
            threshold: cfg.threshold,
            final_threshold: cfg.effective_final_threshold(),
            window: cfg.slice.window_frames,
            refractory_frames: cfg.refractory_frames,
            run: None,
            refractory_until: 0,
        }
    }

    /// Feeds one scored slice; returns a run that this slice closed.
    fn slice(&mut self, start: usize, score: f32) -> Option<Candidate> {
        if score > self.threshold {
            let end = start + self.window;
            match &mut self.run {
                Some(r) => {
                    r.last_end = end;
                    r.len += 1;
                    r.best = r.best.max(score);
                }
                None => {
                    self.run = Some(Run {
                        first_start: start,
                        last_end: end,
                        len: 1,
                        best: score,
                    })
                }
            }
            None
        } else {
            self.close()
        }
    }

    /// Ends the open run; runs of a single trigger point are dropped.
    fn close(&mut self) -> Option<Candidate> {
        let r = self.run.take()?;
        (r.len >= 2).then_some(Candidate {
            span_start_frame: r.first_start,
            span_end_frame: r.last_end,
            y_m1: r.best,
        })
    }

    fn refractory(&self, c: &Candidate) -> bool {
        c.span_start_frame < self.refractory_until
    }

    fn decide(&mut self, c: Candidate, y_m0: f32) -> Option<DetectionEvent> {
        if self.refractory(&c) {
            return None;
        }
        let y_f = (y_m0 + c.y_m1) / 2.0;
        if y_f > self.final_threshold {
            self.refractory_until = c.span_end_frame + self.refractory_frames;
            Some(DetectionEvent {
                span_start_frame: c.span_start_frame,
                span_end_frame: c.span_end_frame,
                y_m0,
                y_m1: c.y_m1,
                y_f,
            })
        } else {
            None
        }
    }

    fn open_run_start(&self) -> Option<usize> {
        self.run.map(|r| r.first_start)
    }
}

fn global_score(m0: &dyn Scorer, span: &Spectrogram, resize_frames: usize) -> Result<f32> {
    let input = bilinear_resize(span, resize_frames)?;
    let s = m0.score(std::slice::from_ref(&input))?;
    s.first()
        .copied()
        .ok_or(StreamError::ScoreCount { expected: 1, got: 0 })
}

fn checked_scores(m1: &dyn Scorer, windows: &[Spectrogram]) -> Result<Vec<f32>> {
    let scores = m1.score(windows)?;
    if scores.len() != windows.len() {
        return Err(StreamError::ScoreCount {
            expected: windows.len(),
            got: scores.len(),
        });
    }
    Ok(scores)
}

/// Incremental detector over one stream of log-mel frames.
pub struct StreamDetector<'a> {
    cfg: DetectorConfig,
    m0: &'a dyn Scorer,
    m1: &'a dyn Scorer,
    bands: usize,
    frame_period_s: f64,
    /// Frame columns starting at absolute frame `offset`.
    buffer: VecDeque<Vec<f32>>,
    offset: usize,
    total: usize,
    next_start: usize,
    last_scored: Option<usize>,
    machine: TriggerMachine,
    candidates: Option<Vec<(Candidate, f32)>>,
}

impl<'a> StreamDetector<'a> {
    pub fn new(cfg: DetectorConfig, bands: usize, m0: &'a dyn Scorer, m1: &'a dyn Scorer) -> Result<Self> {
        cfg.validate()?;
        if bands == 0 {
            return Err(StreamError::Config("band count must be positive".into()));
        }
        let machine = TriggerMachine::new(&cfg);
        Ok(Self {
            cfg,
            m0,
            m1,
            bands,
            frame_period_s: 0.01,
            buffer: VecDeque::new(),
            offset: 0,
            total: 0,
            next_start: 0,
            last_scored: None,
            machine,
            candidates: None,
        })
    }

    /// Also records every closed run with its global score, including runs
    /// the refractory rule or the final threshold reject.
    pub fn with_candidate_log(mut self) -> Self {
        self.candidates = Some(Vec::new());
        self
    }

    pub fn take_candidates(&mut self) -> Vec<(Candidate, f32)> {
        self.candidates.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Frames pushed so far.
    pub fn frames_seen(&self) -> usize {
        self.total
    }

    pub fn frame_period_s(&self) -> f64 {
        self.frame_period_s
    }

    fn window(&self, start: usize, end: usize) -> Spectrogram {
        let cols: Vec<f32> = (start..end)
            .flat_map(|t| self.buffer[t - self.offset].iter().copied())
            .collect();
        Spectrogram::from_frames(self.bands, &cols, self.frame_period_s).expect("buffered frames are finite")
    }

    fn process(&mut self, starts: &[usize], out: &mut Vec<DetectionEvent>) -> Result<()> {
        let w = self.cfg.slice.window_frames;
        for chunk in starts.chunks(self.cfg.score_batch) {
            let windows: Vec<Spectrogram> = chunk.iter().map(|&s| self.window(s, s + w)).collect();
            let scores = checked_scores(self.m1, &windows)?;
            for (&start, &score) in chunk.iter().zip(&scores) {
                self.last_scored = Some(start);
                if let Some(c) = self.machine.slice(start, score) {
                    self.evaluate(c, out)?;
                }
            }
        }
        Ok(())
    }

    fn evaluate(&mut self, c: Candidate, out: &mut Vec<DetectionEvent>) -> Result<()> {
        if self.candidates.is_none() && self.machine.refractory(&c) {
            return Ok(());
        }
        let span = self.window(c.span_start_frame, c.span_end_frame);
        let y_m0 = global_score(self.m0, &span, self.cfg.resize_frames)?;
        if let Some(log) = &mut self.candidates {
            log.push((c, y_m0));
        }
        out.extend(self.machine.decide(c, y_m0));
        Ok(())
    }

    fn trim(&mut self) {
        let step = self.cfg.slice.step();
        let mut keep = self.next_start.saturating_sub(step);
        if let Some(s) = self.machine.open_run_start() {
            keep = keep.min(s);
        }
        while self.offset < keep && !self.buffer.is_empty() {
            self.buffer.pop_front();
            self.offset += 1;
        }
    }

    /// Appends frames in time order and returns any events they complete.
    pub fn push_frames(&mut self, frames: &Spectrogram) -> Result<Vec<DetectionEvent>> {
        if frames.bands() != self.bands {
            return Err(StreamError::Bands {
                expected: self.bands,
                got: frames.bands(),
            });
        }
        self.frame_period_s = frames.frame_period_s();
        for t in 0..frames.frames() {
            self.buffer.push_back(frames.frame(t));
        }
        self.total += frames.frames();
        let w = self.cfg.slice.window_frames;
        let step = self.cfg.slice.step();
        let mut starts = Vec::new();
        while self.next_start + w <= self.total {
            starts.push(self.next_start);
            self.next_start += step;
        }
        let mut out = Vec::new();
        self.process(&starts, &mut out)?;
        self.trim();
        Ok(out)
    }

    /// Ends the stream: scores the flush-right tail window (padding a stream
    /// shorter than one window) and closes any open run.
    pub fn flush(&mut self) -> Result<Vec<DetectionEvent>> {
        let w = self.cfg.slice.window_frames;
        let mut out = Vec::new();
        if self.total == 0 {
            return Ok(out);
        }
        if self.total < w {
            let missing = w - self.total;
            for _ in 0..missing {
                self.buffer.push_back(vec![self.cfg.pad_value; self.bands]);
            }
            self.total = w;
        }
        let tail = self.total - w;
        if self.last_scored != Some(tail) {
            self.process(&[tail], &mut out)?;
        }
        if let Some(c) = self.machine.close() {
            self.evaluate(c, &mut out)?;
        }
        Ok(out)
    }
}

/// Offline detection over a complete spectrogram: every slice is scored
/// up front, then the trigger rule runs over the score list. Produces the
/// same events as pushing the spectrogram through a [`StreamDetector`] in
/// any chunking and flushing.
pub fn detect_spectrogram(
    spec: &Spectrogram,
    cfg: &DetectorConfig,
    m0: &dyn Scorer,
    m1: &dyn Scorer,
) -> Result<Vec<DetectionEvent>> {
    cfg.validate()?;
    let w = cfg.slice.window_frames;
    let padded = pad_frames(spec, w, cfg.pad_value);
    let starts = slice_starts(padded.frames(), &cfg.slice)?;
    let mut scores = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(cfg.score_batch) {
        let windows = chunk
            .iter()
            .map(|&s| padded.crop(s, s + w))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        scores.extend(checked_scores(m1, &windows)?);
    }
    let eval = |c: &Candidate| -> Result<f32> {
        let span = padded.crop(c.span_start_frame, c.span_end_frame)?;
        global_score(m0, &span, cfg.resize_frames)
    };
    events_from_scores(&starts, &scores, cfg, eval)
}

/// The trigger rule over precomputed local scores. `global` is only
/// consulted for runs that survive the refractory rule.
pub fn events_from_scores(
    starts: &[usize],
    scores: &[f32],
    cfg: &DetectorConfig,
    mut global: impl FnMut(&Candidate) -> Result<f32>,
) -> Result<Vec<DetectionEvent>> {
    let mut machine = TriggerMachine::new(cfg);
    let mut out = Vec::new();
    let mut consider = |machine: &mut TriggerMachine, c: Candidate| -> Result<()> {
        if !machine.refractory(&c) {
            let m0 = global(&c)?;
            out.extend(machine.decide(c, m0));
        }
        Ok(())
    };
    for (&s, &y) in starts.iter().zip(scores) {
        if let Some(c) = machine.slice(s, y) {
            consider(&mut machine, c)?;
        }
    }
    if let Some(c) = machine.close() {
        consider(&mut machine, c)?;
    }
    Ok(out)
}

/// Every closed run of two or more trigger points with its global score,
/// before the final threshold and refractory rule. A sweep over final
/// thresholds can then be replayed with [`select_events`] without touching
/// the models again.
pub fn candidates_from_scores(
    starts: &[usize],
    scores: &[f32],
    cfg: &DetectorConfig,
    mut global: impl FnMut(&Candidate) -> Result<f32>,
) -> Result<Vec<(Candidate, f32)>> {
    let mut machine = TriggerMachine::new(cfg);
    let mut out = Vec::new();
    let mut push = |c: Candidate| -> Result<()> {
        let m0 = global(&c)?;
        out.push((c, m0));
        Ok(())
    };
    for (&s, &y) in starts.iter().zip(scores) {
        if let Some(c) = machine.slice(s, y) {
            push(c)?;
        }
    }
    if let Some(c) = machine.close() {
        push(c)?;
    }
    Ok(out)
}

/// Applies the final threshold and refractory rule to candidates in time
/// order. Equals running the detector with `final_threshold`.
pub fn select_events(
    candidates: &[(Candidate, f32)],
    final_threshold: f32,
    refractory_frames: usize,
) -> Vec<DetectionEvent> {
    let mut until = 0;
    let mut out = Vec::new();
    for &(c, y_m0) in candidates {
        if c.span_start_frame < until {
            continue;
        }
        let y_f = (y_m0 + c.y_m1) / 2.0;
        if y_f > final_threshold {
            until = c.span_end_frame + refractory_frames;
            out.push(DetectionEvent {
                span_start_frame: c.span_start_frame,
                span_end_frame: c.span_end_frame,
                y_m0,
                y_m1: c.y_m1,
                y_f,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One band whose value at a window's first frame is that window's score.
    fn scored_stream(scores: &[f32], cfg: &DetectorConfig) -> Spectrogram {
        let step = cfg.slice.step();
        let frames = (scores.len() - 1) * step + cfg.slice.window_frames;
        let mut v = vec![0.0f32; frames];
        for (i, &s) in scores.iter().enumerate() {
            v[i * step] = s;
        }
        Spectrogram::new(1, frames, v, 0.01).unwrap()
    }

    fn first_frame() -> FnScorer<impl Fn(&Spectrogram) -> f32 + Sync> {
        FnScorer(|s: &Spectrogram| s.get(0, 0))
    }

    fn run(scores: &[f32], m0: f32) -> Vec<DetectionEvent> {
        let cfg = DetectorConfig::default();
        let spec = scored_stream(scores, &cfg);
        let m0s = FnScorer(move |_: &Spectrogram| m0);
        let m1 = first_frame();
        let mut d = StreamDetector::new(cfg, 1, &m0s, &m1).unwrap();
        let mut ev = d.push_frames(&spec).unwrap();
        ev.extend(d.flush().unwrap());
        ev
    }

    #[test]
    fn run_of_two_fires_with_max_local_score() {
        let ev = run(&[0.2, 0.9, 0.95, 0.3], 0.85);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].y_m1, 0.95);
        assert!((ev[0].y_f - 0.90).abs() < 1e-6);
        assert_eq!((ev[0].span_start_frame, ev[0].span_end_frame), (30, 160));
    }

    #[test]
    fn singletons_never_fire() {
        assert!(run(&[0.9, 0.2, 0.9, 0.2], 1.0).is_empty());
    }

    #[test]
    fn refractory_suppresses_second_run() {
        // the second run begins within a second of the first event
        let ev = run(&[0.9, 0.9, 0.1, 0.9, 0.9, 0.1], 0.9);
        assert_eq!(ev.len(), 1);
        // far enough apart both fire
        let mut far = vec![0.9, 0.9];
        far.extend([0.1; 8]);
        far.extend([0.9, 0.9]);
        assert_eq!(run(&far, 0.9).len(), 2);
    }

    #[test]
    fn low_global_score_vetoes() {
        assert!(run(&[0.6, 0.6, 0.1], 0.1).is_empty());
    }

    #[test]
    fn wrong_band_count_is_rejected() {
        let m = first_frame();
        let mut d = StreamDetector::new(DetectorConfig::default(), 2, &m, &m).unwrap();
        assert!(matches!(
            d.push_frames(&Spectrogram::filled(1, 10, 0.0, 0.01)),
            Err(StreamError::Bands { .. })
        ));
    }

    #[test]
    fn short_stream_is_padded() {
        let cfg = DetectorConfig::default();
        let m = first_frame();
        let mut d = StreamDetector::new(cfg.clone(), 1, &m, &m).unwrap();
        assert!(d
            .push_frames(&Spectrogram::filled(1, 40, 0.9, 0.01))
            .unwrap()
            .is_empty());
        assert!(d.flush().unwrap().is_empty());
        let offline = detect_spectrogram(&Spectrogram::filled(1, 40, 0.9, 0.01), &cfg, &m, &m).unwrap();
        assert!(offline.is_empty());
    }
}
