//! Synthetic desk-scale keyword corpus.
//!
//! The "keyword" is a fixed two-part motif: a harmonic tone (part A)
//! followed by a rising chirp (part B). Negatives reuse the same
//! ingredients in ways that are not the keyword: a single part, the two
//! parts in reverse order, an unrelated tone, or background alone.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Manifest, ManifestRecord};
use super::wav::{write_wav, SAMPLE_RATE};
use super::{DataError, Label};

const SR: f64 = SAMPLE_RATE as f64;

/// What a negative utterance contains besides background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Background,
    PartA,
    PartB,
    Reversed,
    OtherTone,
    Silence,
}

impl NegativeKind {
    const CYCLE: [NegativeKind; 6] = [
        NegativeKind::Background,
        NegativeKind::PartA,
        NegativeKind::PartB,
        NegativeKind::Reversed,
        NegativeKind::OtherTone,
        NegativeKind::Silence,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtteranceContent {
    Keyword { start_s: f64, duration_s: f64 },
    Negative { decoy: NegativeKind },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedUtterance {
    pub record: ManifestRecord,
    pub duration_s: f64,
    pub content: UtteranceContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub min_utterance_s: f64,
    pub max_utterance_s: f64,
    pub min_keyword_s: f64,
    pub max_keyword_s: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_pos: 200,
            n_neg: 200,
            seed: 0,
            min_utterance_s: 2.0,
            max_utterance_s: 6.0,
            min_keyword_s: 0.3,
            max_keyword_s: 2.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_pos < 10 || self.n_neg < 10 {
            return Err(DataError::Corpus(format!(
                "need at least 10 positives and 10 negatives, got {}/{}",
                self.n_pos, self.n_neg
            )));
        }
        if !(self.min_keyword_s > 0.0
            && self.min_keyword_s <= self.max_keyword_s
            && self.min_utterance_s <= self.max_utterance_s
            && self.max_keyword_s <= self.min_utterance_s)
        {
            return Err(DataError::Corpus("inconsistent duration ranges".into()));
        }
        Ok(())
    }
}

/// Frequencies of the motif, jittered slightly per utterance.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticVoice {
    pub tone_hz: f64,
    pub chirp_from_hz: f64,
    pub chirp_to_hz: f64,
}

impl Default for SyntheticVoice {
    fn default() -> Self {
        Self {
            tone_hz: 520.0,
            chirp_from_hz: 1200.0,
            chirp_to_hz: 2800.0,
        }
    }
}

impl SyntheticVoice {
    fn jittered(&self, rng: &mut impl Rng) -> Self {
        let j = rng.gen_range(0.97..1.03);
        Self {
            tone_hz: self.tone_hz * j,
            chirp_from_hz: self.chirp_from_hz * j,
            chirp_to_hz: self.chirp_to_hz * j,
        }
    }

    fn part_a(&self, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * SR) as usize;
        (0..n)
            .map(|i| {
                let t = i as f64 / SR;
                let ph = 2.0 * PI * self.tone_hz * t;
                amp * envelope(i, n) * (ph.sin() + 0.5 * (2.0 * ph).sin() + 0.25 * (3.0 * ph).sin()) / 1.75
            })
            .collect()
    }

    fn part_b(&self, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * SR) as usize;
        let rate = (self.chirp_to_hz - self.chirp_from_hz) / seconds.max(1e-3);
        (0..n)
            .map(|i| {
                let t = i as f64 / SR;
                let ph = 2.0 * PI * (self.chirp_from_hz * t + 0.5 * rate * t * t);
                amp * envelope(i, n) * ph.sin()
            })
            .collect()
    }
}

/// 15 ms raised-cosine fade in and out.
fn envelope(i: usize, n: usize) -> f64 {
    let ramp = (0.015 * SR) as usize;
    let ramp = ramp.min(n / 2).max(1);
    let edge = i.min(n - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

/// The keyword motif (part A then part B) lasting `seconds`.
pub fn synthesize_keyword(voice: &SyntheticVoice, seconds: f64, amp: f64) -> Vec<f64> {
    let mut out = voice.part_a(seconds / 2.0, amp);
    out.extend(voice.part_b(seconds - seconds / 2.0, amp));
    out
}

fn mix_at(dst: &mut [f64], src: &[f64], offset: usize) {
    for (d, s) in dst[offset..].iter_mut().zip(src) {
        *d += s;
    }
}

fn background(rng: &mut impl Rng, samples: usize, silent: bool) -> Vec<f64> {
    if silent {
        return vec![0.0; samples];
    }
    let sigma = rng.gen_range(0.002..0.03);
    let hum_amp = if rng.gen_bool(0.3) {
        rng.gen_range(0.0..0.02)
    } else {
        0.0
    };
    let hum_hz = rng.gen_range(50.0..120.0);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut lowpass = 0.0;
    (0..samples)
        .map(|i| {
            let white: f64 = noise.sample(rng);
            lowpass = 0.9 * lowpass + 0.1 * white;
            0.6 * white + 2.0 * lowpass + hum_amp * (2.0 * PI * hum_hz * i as f64 / SR).sin()
        })
        .collect()
}

fn quantize(x: &[f64]) -> Vec<i16> {
    x.iter()
        .map(|&v| (v * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

fn decoy(kind: NegativeKind, voice: &SyntheticVoice, rng: &mut impl Rng, spec: &CorpusSpec) -> Vec<f64> {
    let amp = rng.gen_range(0.1..0.4);
    match kind {
        NegativeKind::Background | NegativeKind::Silence => Vec::new(),
        NegativeKind::PartA => voice.part_a(rng.gen_range(0.15..spec.max_keyword_s / 2.0), amp),
        NegativeKind::PartB => voice.part_b(rng.gen_range(0.15..spec.max_keyword_s / 2.0), amp),
        NegativeKind::Reversed => {
            let d = rng.gen_range(spec.min_keyword_s..spec.max_keyword_s);
            let mut out = voice.part_b(d / 2.0, amp);
            out.extend(voice.part_a(d - d / 2.0, amp));
            out
        }
        NegativeKind::OtherTone => {
            let other = SyntheticVoice {
                tone_hz: rng.gen_range(900.0..1100.0),
                chirp_from_hz: rng.gen_range(3000.0..3600.0),
                chirp_to_hz: rng.gen_range(1600.0..2000.0),
            };
            synthesize_keyword(&other, rng.gen_range(spec.min_keyword_s..spec.max_keyword_s), amp)
        }
    }
}

/// Audio for utterance `index` of the given class; a pure function of
/// `(spec, label, index)`.
pub fn render_utterance(spec: &CorpusSpec, label: Label, index: usize) -> (Vec<i16>, UtteranceContent) {
    let stream = (label.class_index() as u64) << 32 | index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let voice = SyntheticVoice::default().jittered(&mut rng);
    let seconds = rng.gen_range(spec.min_utterance_s..=spec.max_utterance_s);
    let samples = (seconds * SR) as usize;
    match label {
        Label::Positive => {
            let silent = rng.gen_bool(0.1);
            let mut audio = background(&mut rng, samples, silent);
            let kw_s = rng.gen_range(spec.min_keyword_s..=spec.max_keyword_s);
            let amp = rng.gen_range(0.1..0.4);
            let motif = synthesize_keyword(&voice, kw_s, amp);
            let start = rng.gen_range(0..=samples - motif.len());
            mix_at(&mut audio, &motif, start);
            (
                quantize(&audio),
                UtteranceContent::Keyword {
                    start_s: start as f64 / SR,
                    duration_s: motif.len() as f64 / SR,
                },
            )
        }
        Label::Negative => {
            let kind = NegativeKind::CYCLE[index % NegativeKind::CYCLE.len()];
            let silent = kind == NegativeKind::Silence || rng.gen_bool(0.1);
            let mut audio = background(&mut rng, samples, silent);
            let d = decoy(kind, &voice, &mut rng, spec);
            if !d.is_empty() {
                let start = rng.gen_range(0..=samples - d.len());
                mix_at(&mut audio, &d, start);
            }
            (quantize(&audio), UtteranceContent::Negative { decoy: kind })
        }
    }
}

/// Writes `pos_NNNN.wav` / `neg_NNNN.wav` and `manifest.jsonl` (relative
/// paths) into `out_dir`.
pub fn generate_toy_corpus(
    out_dir: &Path,
    spec: &CorpusSpec,
) -> Result<(Manifest, Vec<GeneratedUtterance>), DataError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut items = Vec::with_capacity(spec.n_pos + spec.n_neg);
    for (label, count, prefix) in [
        (Label::Positive, spec.n_pos, "pos"),
        (Label::Negative, spec.n_neg, "neg"),
    ] {
        for i in 0..count {
            let (pcm, content) = render_utterance(spec, label, i);
            let name = format!("{prefix}_{i:04}.wav");
            write_wav(&out_dir.join(&name), &pcm, SAMPLE_RATE)?;
            items.push(GeneratedUtterance {
                record: ManifestRecord {
                    path: name.into(),
                    label,
                    keyword_id: label.is_positive().then(|| "synthetic".to_string()),
                },
                duration_s: pcm.len() as f64 / SR,
                content,
            });
        }
    }
    let records: Vec<ManifestRecord> = items.iter().map(|i| i.record.clone()).collect();
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    let records = records
        .into_iter()
        .map(|mut r| {
            r.path = out_dir.join(&r.path);
            r
        })
        .collect();
    Ok((Manifest { records }, items))
}

/// Long keyword-free audio: background with decoys every few seconds and
/// occasional silent stretches, yielded in fixed-length chunks so hours of
/// audio never sit in memory at once.
#[derive(Debug, Clone)]
pub struct NegativeStream {
    spec: CorpusSpec,
    chunk_samples: usize,
    total_chunks: usize,
    next: usize,
}

impl NegativeStream {
    pub fn new(seed: u64, duration_s: f64, chunk_s: f64) -> Self {
        let chunk_samples = (chunk_s * SR) as usize;
        Self {
            spec: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
            chunk_samples,
            total_chunks: (duration_s * SR / chunk_samples as f64).ceil() as usize,
            next: 0,
        }
    }

    pub fn duration_s(&self) -> f64 {
        (self.total_chunks * self.chunk_samples) as f64 / SR
    }

    fn render_chunk(&self, index: usize) -> Vec<i16> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_0000_0000);
        rng.set_stream(index as u64);
        let voice = SyntheticVoice::default().jittered(&mut rng);
        let silent = rng.gen_bool(0.1);
        let mut audio = background(&mut rng, self.chunk_samples, silent);
        let mut pos = rng.gen_range(0..(3.0 * SR) as usize);
        while pos < self.chunk_samples {
            let kind = NegativeKind::CYCLE[rng.gen_range(1..5)];
            let d = decoy(kind, &voice, &mut rng, &self.spec);
            let len = d.len().min(self.chunk_samples - pos);
            mix_at(&mut audio, &d[..len], pos);
            pos += d.len() + rng.gen_range((2.0 * SR) as usize..(8.0 * SR) as usize);
        }
        quantize(&audio)
    }
}

impl Iterator for NegativeStream {
    type Item = Vec<i16>;

    fn next(&mut self) -> Option<Vec<i16>> {
        if self.next >= self.total_chunks {
            return None;
        }
        let chunk = self.render_chunk(self.next);
        self.next += 1;
        Some(chunk)
    }
}
