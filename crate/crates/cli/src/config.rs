//! The run configuration: one TOML file with a section per subsystem.
//! Missing keys take library defaults; command-line flags override both.

use std::path::Path;

use anyhow::{bail, Context, Result};
use res2wake::data::CorpusSpec;
use res2wake::dsp::FeatureConfig;
use res2wake::stream::DetectorConfig;
use res2wake::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--seed` reseeds everything that draws random numbers.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.corpus.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().context("[corpus]")?;
        self.features.validate().context("[features]")?;
        self.train.validate().context("[train]")?;
        self.detector.validate().context("[detector]")?;
        if self.detector.slice != self.train.slice {
            bail!("[detector].slice must match [train].slice so M1 sees windows of the size it was trained on");
        }
        if self.detector.resize_frames != self.train.resize_frames {
            bail!("[detector].resize_frames must match [train].resize_frames");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c: RunConfig = toml::from_str("[train]\nlr0 = 0.001\n[features]\nn_mels = 40\n").unwrap();
        assert_eq!(c.train.lr0, 1e-3);
        assert_eq!(c.features.n_mels, 40);
        assert_eq!(c.detector, DetectorConfig::default());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[trainer]\nlr0 = 1.0\n").is_err());
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let mut c = RunConfig::default();
        c.detector.slice.window_frames = 50;
        assert!(c.validate().is_err());
    }
}
