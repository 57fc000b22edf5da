//! The single JSON configuration document shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::FramerConfig;
use crate::beamforming::ArrayGeometry;
use crate::classification::TrainingOptions;
use crate::error::{Error, Result};
use crate::features::FilterbankConfig;
use crate::hash::json_digest;
use crate::mbo::MboSettings;
use crate::scene::{CorpusOptions, HeadModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioSection {
    pub processing_rate: u32,
    pub frame: FramerConfig,
}

impl Default for AudioSection {
    fn default() -> Self {
        Self {
            processing_rate: 20_000,
            frame: FramerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSection {
    pub repeats: usize,
    pub folds: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = TrainingOptions::default();
        Self {
            repeats: d.repeats,
            folds: d.folds,
        }
    }
}

impl ClassifierSection {
    pub fn options(&self, seed: u64) -> TrainingOptions {
        TrainingOptions {
            repeats: self.repeats,
            folds: self.folds,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MboSection {
    #[serde(flatten)]
    pub settings: MboSettings,
    /// Recordings per direction used by the tuning objective.
    pub files_per_direction: usize,
}

impl Default for MboSection {
    fn default() -> Self {
        Self {
            settings: MboSettings::default(),
            files_per_direction: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererSection {
    pub head: HeadModel,
    pub files_per_direction: usize,
    pub duration_s: f64,
}

impl Default for RendererSection {
    fn default() -> Self {
        let c = CorpusOptions::default();
        Self {
            head: HeadModel::default(),
            files_per_direction: c.files_per_direction,
            duration_s: c.duration_s,
        }
    }
}

impl RendererSection {
    pub fn corpus(&self, seed: u64) -> CorpusOptions {
        CorpusOptions {
            files_per_direction: self.files_per_direction,
            duration_s: self.duration_s,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub audio: AudioSection,
    pub geometry: ArrayGeometry,
    pub filterbank: FilterbankConfig,
    pub classifier: ClassifierSection,
    pub mbo: MboSection,
    pub renderer: RendererSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.processing_rate == 0 {
            return Err(Error::Config("processing_rate must be positive".into()));
        }
        self.audio.frame.validate()?;
        self.geometry.validate()?;
        self.filterbank.validate(self.audio.processing_rate)?;
        self.renderer.head.validate()?;
        if self.classifier.repeats == 0 || self.classifier.folds < 2 {
            return Err(Error::Config(
                "classifier needs repeats >= 1 and folds >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Digest of every setting that changes feature values. Stamped into
    /// feature frames and model files.
    pub fn feature_hash(&self) -> u64 {
        json_digest(&(&self.audio, &self.geometry, &self.filterbank))
    }

    pub fn with_filterbank(&self, filterbank: FilterbankConfig) -> Self {
        Self {
            filterbank,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"classifier": {"folds": 3}}"#).unwrap();
        assert_eq!(cfg.classifier.folds, 3);
        assert_eq!(cfg.classifier.repeats, 5);
        assert_eq!(cfg.audio.processing_rate, 20_000);
        assert_eq!(cfg.mbo.settings.budget, 80);
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn feature_hash_tracks_feature_settings_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.classifier.repeats = 2;
        b.mbo.settings.budget = 10;
        assert_eq!(a.feature_hash(), b.feature_hash());
        b.filterbank.spectral_edges[0].0 = 250.0;
        assert_ne!(a.feature_hash(), b.feature_hash());
        let mut c = a.clone();
        c.geometry.mic_spacing_m = 0.012;
        assert_ne!(a.feature_hash(), c.feature_hash());
    }

    #[test]
    fn invalid_sections_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"audio": {"processing_rate": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"classifier": {"folds": 1}}"#).is_err());
        assert!(PipelineConfig::from_json("{").is_err());
    }
}
