//! Run configuration: every hyperparameter in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::AdversarialConfig;
use crate::align::SaConfig;
use crate::audio::CorpusSpec;
use crate::backbone::{BackboneConfig, TokenLmConfig};
use crate::bridge::BridgeConfig;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::ftp::FtpConfig;
use crate::optim::OptimizerConfig;
use crate::params::hex_digest;
use crate::schedule::ScheduleConfig;
use crate::spectral::SpectralConfig;

/// Which LLM-side objectives a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Objectives {
    pub bridge: bool,
    pub ftp: bool,
    pub sa: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self::full()
    }
}

impl Objectives {
    pub fn full() -> Self {
        Self {
            bridge: true,
            ftp: true,
            sa: true,
        }
    }

    /// Reconstruction-only control.
    pub fn baseline() -> Self {
        Self {
            bridge: false,
            ftp: false,
            sa: false,
        }
    }

    pub fn lm_branch(&self) -> bool {
        self.ftp || self.sa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimGroups {
    pub codec: OptimizerConfig,
    pub aux: OptimizerConfig,
    pub disc: OptimizerConfig,
}

impl Default for OptimGroups {
    fn default() -> Self {
        Self {
            codec: OptimizerConfig::Sgd {
                lr: 5e-6,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            aux: OptimizerConfig::adamw(1e-4),
            disc: OptimizerConfig::adamw(1e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub micro_batches: usize,
    pub segment_seconds: f64,
    pub objectives: Objectives,
    pub gan: bool,
    /// Reconstruction-only steps run before the scheduled loop.
    pub codec_pretrain_steps: u64,
    pub codec_pretrain: OptimizerConfig,
    /// Fraction of utterances held out from training.
    pub heldout_fraction: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            micro_batches: 10,
            segment_seconds: 0.64,
            objectives: Objectives::full(),
            gan: true,
            codec_pretrain_steps: 0,
            codec_pretrain: OptimizerConfig::adamw(1e-3),
            heldout_fraction: 0.1,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub coherence_pairs: usize,
    pub split_range: [f64; 2],
    pub recon_utterances: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coherence_pairs: 200,
            split_range: [0.3, 0.7],
            recon_utterances: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub codec: CodecConfig,
    pub spectral: SpectralConfig,
    pub adversarial: AdversarialConfig,
    pub bridge: BridgeConfig,
    pub backbone: BackboneConfig,
    pub ftp: FtpConfig,
    pub sa: SaConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimGroups,
    pub train: TrainConfig,
    pub token_lm: TokenLmConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.codec.validate()?;
        self.spectral.validate()?;
        self.adversarial.validate()?;
        self.bridge.validate()?;
        self.backbone.validate()?;
        self.sa.validate()?;
        self.schedule.validate()?;
        crate::ftp::ftp_weights(self.ftp.horizons)?;
        if self.codec.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(format!(
                "codec rate {} differs from corpus rate {}",
                self.codec.sample_rate, self.corpus.sample_rate
            )));
        }
        if self.backbone.audio_vocab != self.codec.codebook_size || self.token_lm.vocab != self.codec.codebook_size {
            return Err(Error::Config("audio vocabularies must equal the codebook size".into()));
        }
        if self.backbone.text_vocab < self.corpus.content_vocab {
            return Err(Error::Config("text vocabulary smaller than the content vocabulary".into()));
        }
        if self.train.micro_batches == 0 {
            return Err(Error::Config("at least one micro-batch per step".into()));
        }
        let seg = (self.train.segment_seconds * self.codec.sample_rate as f64).round() as usize;
        let frames = seg / self.codec.hop();
        if frames > self.backbone.max_seq {
            return Err(Error::Config(format!(
                "segments of {frames} frames exceed backbone context {}",
                self.backbone.max_seq
            )));
        }
        if seg < self.spectral.min_len() {
            return Err(Error::Config("segments shorter than the largest FFT".into()));
        }
        if !(0.0..1.0).contains(&self.train.heldout_fraction) {
            return Err(Error::Config("held-out fraction outside [0, 1)".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_digest(h)[..16].to_string()
    }

    pub fn segment_len(&self) -> usize {
        (self.train.segment_seconds * self.codec.sample_rate as f64).round() as usize
    }

    /// The small-scale configuration the directional experiment uses.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.schedule.scale = 0.1;
        cfg.backbone.layers = 4;
        cfg.backbone.hidden = 64;
        cfg.token_lm.hidden = 64;
        cfg.train.micro_batches = 1;
        cfg.train.codec_pretrain_steps = 1500;
        // Plain SGD at 5e-6 barely moves a codec trained from scratch
        // within 1.5k clipped steps.
        cfg.optim.codec = OptimizerConfig::adamw(1e-4);
        cfg.optim.aux = OptimizerConfig::adamw(1e-3);
        cfg
    }

    /// A run of about a hundred steps over a handful of utterances, for
    /// tests and examples.
    pub fn smoke() -> Self {
        let mut cfg = Self::desk();
        cfg.corpus.n_utterances = 10;
        cfg.schedule.scale = 0.004;
        cfg.train.codec_pretrain_steps = 2;
        cfg.train.heldout_fraction = 0.2;
        cfg.backbone.pretrain_steps = 5;
        cfg.token_lm.epochs = 1;
        cfg.eval.coherence_pairs = 4;
        cfg.eval.recon_utterances = 2;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        RunConfig::desk().validate().unwrap();
        RunConfig::smoke().validate().unwrap();
        assert_ne!(RunConfig::desk().hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("[schedule]\nscale = 0.1\n[train]\nmicro_batches = 3\n").unwrap();
        assert_eq!(cfg.schedule.scale, 0.1);
        assert_eq!(cfg.train.micro_batches, 3);
        assert_eq!(cfg.codec, CodecConfig::default());
    }

    #[test]
    fn inconsistent_documents_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[codec]\ncodebook_size = 64\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[schedule]\nsa_delay = 5\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("not = [valid"), Err(Error::Config(_))));
    }
}
