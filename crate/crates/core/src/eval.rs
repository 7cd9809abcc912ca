//! FRR / false-alarms-per-hour operating points and DET sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::stream::{select_events, Candidate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no negative audio to count false alarms against")]
    NoNegativeAudio,
    #[error("no positive utterances to measure rejections on")]
    NoPositives,
    #[error("thresholds must be finite and strictly increasing")]
    Thresholds,
    #[error("invalid threshold range `{0}` (expected start:stop:count)")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f32,
    pub frr: f64,
    pub fah: f64,
}

/// Final scores of the events detected on one labelled utterance or stream.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEvents {
    pub label: Label,
    pub duration_s: f64,
    pub scores: Vec<f32>,
}

fn check_thresholds(thresholds: &[f32]) -> Result<()> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(EvalError::Thresholds);
    }
    Ok(())
}

fn totals(labels: impl Iterator<Item = (Label, f64)>) -> Result<(usize, f64)> {
    let mut positives = 0;
    let mut neg_seconds = 0.0;
    for (label, d) in labels {
        match label {
            Label::Positive => positives += 1,
            Label::Negative => neg_seconds += d,
        }
    }
    if !(neg_seconds > 0.0) {
        return Err(EvalError::NoNegativeAudio);
    }
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok((positives, neg_seconds / 3600.0))
}

/// Thresholds the given events: a positive is detected iff one of its
/// events scores above the threshold; every such event on negative audio is
/// a false alarm.
pub fn evaluate(utterances: &[UtteranceEvents], thresholds: &[f32]) -> Result<Vec<DetPoint>> {
    check_thresholds(thresholds)?;
    let (positives, neg_hours) = totals(utterances.iter().map(|u| (u.label, u.duration_s)))?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut missed = 0;
            let mut alarms = 0;
            for u in utterances {
                let hits = u.scores.iter().filter(|&&s| s > t).count();
                match u.label {
                    Label::Positive => missed += (hits == 0) as usize,
                    Label::Negative => alarms += hits,
                }
            }
            DetPoint {
                threshold: t,
                frr: missed as f64 / positives as f64,
                fah: alarms as f64 / neg_hours,
            }
        })
        .collect())
}

/// Candidate runs (with global scores) found on one utterance or stream.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceCandidates {
    pub label: Label,
    pub duration_s: f64,
    pub candidates: Vec<(Candidate, f32)>,
}

/// Replays the detector's final decision at every threshold, so each point
/// reflects a detector run with that final threshold (refractory included).
pub fn sweep(
    utterances: &[UtteranceCandidates],
    thresholds: &[f32],
    refractory_frames: usize,
) -> Result<Vec<DetPoint>> {
    check_thresholds(thresholds)?;
    totals(utterances.iter().map(|u| (u.label, u.duration_s)))?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let at_t: Vec<UtteranceEvents> = utterances
            .iter()
            .map(|u| UtteranceEvents {
                label: u.label,
                duration_s: u.duration_s,
                scores: select_events(&u.candidates, t, refractory_frames)
                    .iter()
                    .map(|e| e.y_f)
                    .collect(),
            })
            .collect();
        points.extend(evaluate(&at_t, &[t])?);
    }
    Ok(points)
}

/// FRR at `target_fah`, interpolating linearly between the two sweep points
/// that bracket it. When every point is already at or below the target the
/// lowest-threshold FRR is returned; when none reaches it, 1.0.
pub fn frr_at_fah(points: &[DetPoint], target_fah: f64) -> f64 {
    let Some(j) = points.iter().position(|p| p.fah <= target_fah) else {
        return 1.0;
    };
    let hi = points[j];
    if j == 0 || hi.fah == target_fah {
        return hi.frr;
    }
    let lo = points[j - 1];
    let t = (lo.fah - target_fah) / (lo.fah - hi.fah);
    lo.frr + t * (hi.frr - lo.frr)
}

/// `start:stop:count`, inclusive of both ends.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f32>> {
    let bad = || EvalError::Range(spec.to_string());
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, n] = parts[..] else {
        return Err(bad());
    };
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !(a.is_finite() && b.is_finite()) || (n > 1 && a >= b) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a as f32]);
    }
    let out: Vec<f32> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64) as f32)
        .collect();
    check_thresholds(&out).map_err(|_| bad())?;
    Ok(out)
}

pub fn write_det_csv(mut w: impl Write, points: &[DetPoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,frr,fah")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.frr, p.fah)?;
    }
    Ok(())
}

/// True when FRR never decreases and FAH never increases along the sweep.
pub fn is_monotone(points: &[DetPoint]) -> bool {
    points.windows(2).all(|w| w[1].frr >= w[0].frr && w[1].fah <= w[0].fah)
}
