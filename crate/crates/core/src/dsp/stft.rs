use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{DspError, Spectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 160,
            n_mels: 256,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::Config(m));
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return bad(format!(
                "n_fft {} hop {} n_mels {} must be positive",
                self.n_fft, self.hop, self.n_mels
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "mel range {}..{} Hz must lie within 0..{nyquist}",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }

    pub fn frame_period_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// `1 + floor((len - n_fft) / hop)`, or zero when shorter than a window.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.n_fft {
            0
        } else {
            1 + (samples - self.n_fft) / self.hop
        }
    }

    /// The value a band takes when it receives no energy.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter stored as its first non-zero bin plus weights.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f32>,
}

fn mel_filters(cfg: &FeatureConfig) -> Vec<MelFilter> {
    let bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first_bin = 0;
            let mut weights = Vec::new();
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = ((f - left) / (centre - left)).min((right - f) / (right - centre));
                if w > 0.0 {
                    if weights.is_empty() {
                        first_bin = k;
                    }
                    weights.push(w as f32);
                } else if !weights.is_empty() {
                    break;
                }
            }
            MelFilter { first_bin, weights }
        })
        .collect()
}

/// STFT → power → triangular mel filterbank → natural log with a floor.
///
/// Frames are taken without centering: frame `t` covers samples
/// `[t*hop, t*hop + n_fft)` under a periodic Hann window.
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    window: Vec<f32>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let filters = mel_filters(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Log-mel column for one window of `n_fft` samples (already scaled).
    fn frame_into(&self, samples: &[f32], buf: &mut [Complex32], scratch: &mut [Complex32], out: &mut [f32]) {
        for ((b, &s), &w) in buf.iter_mut().zip(samples).zip(&self.window) {
            *b = Complex32::new(s * w, 0.0);
        }
        self.fft.process_with_scratch(buf, scratch);
        let floor = self.cfg.log_floor;
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let energy: f64 = f
                .weights
                .iter()
                .zip(&buf[f.first_bin..])
                .map(|(&w, c)| w as f64 * c.norm_sqr() as f64)
                .sum();
            *o = (energy + floor).ln() as f32;
        }
    }

    /// Frame-major log-mel rows for every complete window in `samples`.
    fn rows(&self, samples: &[f32]) -> Vec<f32> {
        let frames = self.cfg.frame_count(samples.len());
        let bands = self.cfg.n_mels;
        let mut rows = vec![0.0f32; frames * bands];
        let mut buf = vec![Complex32::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for (t, row) in rows.chunks_mut(bands).enumerate() {
            let start = t * self.cfg.hop;
            self.frame_into(&samples[start..start + self.cfg.n_fft], &mut buf, &mut scratch, row);
        }
        rows
    }

    pub fn compute(&self, pcm: &[i16]) -> Result<Spectrogram, DspError> {
        if pcm.len() < self.cfg.n_fft {
            return Err(DspError::TooShort {
                got: pcm.len(),
                need: self.cfg.n_fft,
            });
        }
        let samples: Vec<f32> = pcm.iter().map(|&s| s as f32 / 32768.0).collect();
        let rows = self.rows(&samples);
        Spectrogram::from_frames(self.cfg.n_mels, &rows, self.cfg.frame_period_s())
    }
}

/// Log-mel spectrogram of 16-bit PCM with the default front end
/// (1024-point DFT, hop 160, 256 mel bands over 0-8 kHz).
pub fn stft_logmel(pcm: &[i16], sample_rate: u32) -> Result<Spectrogram, DspError> {
    let cfg = FeatureConfig::default();
    if sample_rate != cfg.sample_rate {
        return Err(DspError::SampleRate {
            got: sample_rate,
            expected: cfg.sample_rate,
        });
    }
    LogMelExtractor::new(cfg)?.compute(pcm)
}

/// Incremental front end: push PCM as it arrives, get the newly completed
/// frames back. Produces exactly the frames of [`LogMelExtractor::compute`]
/// on the concatenated input.
#[derive(Debug)]
pub struct StreamingFrontend {
    extractor: LogMelExtractor,
    pending: Vec<f32>,
}

impl StreamingFrontend {
    pub fn new(cfg: FeatureConfig) -> Result<Self, DspError> {
        Ok(Self {
            extractor: LogMelExtractor::new(cfg)?,
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        self.extractor.config()
    }

    pub fn push(&mut self, pcm: &[i16]) -> Option<Spectrogram> {
        self.pending.extend(pcm.iter().map(|&s| s as f32 / 32768.0));
        let cfg = self.extractor.config();
        let frames = cfg.frame_count(self.pending.len());
        if frames == 0 {
            return None;
        }
        let rows = self.extractor.rows(&self.pending);
        let consumed = frames * cfg.hop;
        self.pending.drain(..consumed);
        Some(Spectrogram::from_frames(cfg.n_mels, &rows, cfg.frame_period_s()).expect("finite log-mel rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, amp: f64) -> Vec<i16> {
        let n = (16000.0 * seconds) as usize;
        (0..n)
            .map(|i| (amp * 32767.0 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as i16)
            .collect()
    }

    #[test]
    fn silence_is_floor() {
        let spec = stft_logmel(&vec![0i16; 16000], 16000).unwrap();
        assert_eq!(spec.frames(), 94);
        assert_eq!(spec.bands(), 256);
        let floor = (1e-10f64).ln() as f32;
        assert!(spec.values().iter().all(|&v| v == floor));
        assert!((spec.frame_period_s() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rejects_short_and_wrong_rate() {
        assert!(matches!(stft_logmel(&[0; 1023], 16000), Err(DspError::TooShort { .. })));
        assert!(matches!(
            stft_logmel(&[0; 2048], 8000),
            Err(DspError::SampleRate { .. })
        ));
        assert_eq!(stft_logmel(&[0; 1024], 16000).unwrap().frames(), 1);
    }

    #[test]
    fn stationary_tone_peaks_in_one_band() {
        let spec = stft_logmel(&sine(1000.0, 0.5, 0.5), 16000).unwrap();
        let peak = |t: usize| {
            (0..spec.bands())
                .max_by(|&a, &b| spec.get(a, t).total_cmp(&spec.get(b, t)))
                .unwrap()
        };
        let first = peak(0);
        assert!((0..spec.frames()).all(|t| peak(t) == first));
        // 1 kHz sits on the mel scale at roughly a third of the range
        let mel_pos = hz_to_mel(1000.0) / hz_to_mel(8000.0) * 257.0;
        assert!(
            (first as f64 - mel_pos).abs() < 3.0,
            "peak band {first}, expected near {mel_pos}"
        );
    }

    #[test]
    fn framing_is_local() {
        let a = sine(440.0, 0.4, 0.3);
        let mut ab = a.clone();
        ab.extend_from_slice(&a);
        let single = stft_logmel(&a, 16000).unwrap();
        let double = stft_logmel(&ab, 16000).unwrap();
        assert_eq!(double.crop(0, single.frames()).unwrap(), single);
    }

    #[test]
    fn streaming_matches_batch() {
        let audio = sine(700.0, 1.3, 0.2);
        let batch = stft_logmel(&audio, 16000).unwrap();
        let mut fe = StreamingFrontend::new(FeatureConfig::default()).unwrap();
        let mut acc: Option<Spectrogram> = None;
        for chunk in audio.chunks(777) {
            if let Some(s) = fe.push(chunk) {
                acc = Some(match acc {
                    None => s,
                    Some(a) => a.concat(&s).unwrap(),
                });
            }
        }
        assert_eq!(acc.unwrap(), batch);
    }

    #[test]
    fn filters_cover_range() {
        let cfg = FeatureConfig::default();
        let f = mel_filters(&cfg);
        assert_eq!(f.len(), 256);
        assert!(f.iter().all(|m| m.weights.iter().all(|&w| w > 0.0 && w <= 1.0)));
        assert!(f.last().unwrap().first_bin > 400);
    }
}
