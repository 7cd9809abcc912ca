//! PCM in, detections out: the log-mel front end wired to the detector.

use crate::data::Label;
use crate::dsp::{FeatureConfig, LogMelExtractor, StreamingFrontend};
use crate::eval::UtteranceCandidates;
use crate::stream::{detect_spectrogram, Candidate, DetectionEvent, DetectorConfig, Result, Scorer, StreamDetector};

pub struct Pipeline<'a> {
    extractor: LogMelExtractor,
    pub features: FeatureConfig,
    pub detector: DetectorConfig,
    pub m0: &'a dyn Scorer,
    pub m1: &'a dyn Scorer,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        features: FeatureConfig,
        detector: DetectorConfig,
        m0: &'a dyn Scorer,
        m1: &'a dyn Scorer,
    ) -> Result<Self> {
        features.validate()?;
        detector.validate()?;
        Ok(Self {
            extractor: LogMelExtractor::new(features.clone())?,
            features,
            detector,
            m0,
            m1,
        })
    }

    fn stream_detector(&self) -> Result<StreamDetector<'a>> {
        StreamDetector::new(self.detector.clone(), self.features.n_mels, self.m0, self.m1)
    }

    /// Events on a whole clip, scored offline.
    pub fn detect_clip(&self, pcm: &[i16]) -> Result<Vec<DetectionEvent>> {
        if pcm.len() < self.features.n_fft {
            return Ok(Vec::new());
        }
        let spec = self.extractor.compute(pcm)?;
        detect_spectrogram(&spec, &self.detector, self.m0, self.m1)
    }

    /// Every candidate run on a whole clip with its global score.
    pub fn clip_candidates(&self, pcm: &[i16]) -> Result<Vec<(Candidate, f32)>> {
        if pcm.len() < self.features.n_fft {
            return Ok(Vec::new());
        }
        let mut d = self.stream_detector()?.with_candidate_log();
        let spec = self.extractor.compute(pcm)?;
        d.push_frames(&spec)?;
        d.flush()?;
        Ok(d.take_candidates())
    }

    /// Runs audio chunks through the streaming front end and detector.
    /// Returns the events, every candidate run, and the audio duration.
    pub fn detect_stream(
        &self,
        chunks: impl IntoIterator<Item = Vec<i16>>,
    ) -> Result<(Vec<DetectionEvent>, Vec<(Candidate, f32)>, f64)> {
        let mut frontend = StreamingFrontend::new(self.features.clone())?;
        let mut d = self.stream_detector()?.with_candidate_log();
        let mut events = Vec::new();
        let mut samples = 0usize;
        for chunk in chunks {
            samples += chunk.len();
            if let Some(frames) = frontend.push(&chunk) {
                events.extend(d.push_frames(&frames)?);
            }
        }
        events.extend(d.flush()?);
        Ok((
            events,
            d.take_candidates(),
            samples as f64 / self.features.sample_rate as f64,
        ))
    }

    pub fn labelled_candidates(&self, pcm: &[i16], label: Label) -> Result<UtteranceCandidates> {
        Ok(UtteranceCandidates {
            label,
            duration_s: pcm.len() as f64 / self.features.sample_rate as f64,
            candidates: self.clip_candidates(pcm)?,
        })
    }
}
