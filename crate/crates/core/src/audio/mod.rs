//! Waveforms, WAV I/O, segmentation and the seeded synthetic corpus.

mod segment;
mod synth;
mod wav;

pub use segment::{segment, Segment};
pub use synth::{
    generate_corpus, make_incoherent_pair, read_manifest, render_utterance, write_corpus, CorpusSpec,
    IncoherentPair, ManifestRecord, NuisanceRanges,
};
pub use wav::{read_wav, write_wav};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Rejects empty or non-finite sample arrays and a zero rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// The acoustic factors the synthesizer can perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceKind {
    Gain,
    PitchOffset,
    AdditiveNoise,
    Smoothing,
}

impl NuisanceKind {
    pub const ALL: [NuisanceKind; 4] = [
        NuisanceKind::Gain,
        NuisanceKind::PitchOffset,
        NuisanceKind::AdditiveNoise,
        NuisanceKind::Smoothing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NuisanceKind::Gain => "gain",
            NuisanceKind::PitchOffset => "pitch-offset",
            NuisanceKind::AdditiveNoise => "additive-noise",
            NuisanceKind::Smoothing => "smoothing",
        }
    }
}

impl fmt::Display for NuisanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NuisanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown nuisance kind `{s}`")))
    }
}

/// The perturbation values applied to one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRecord {
    pub gain: f64,
    /// Semitones.
    pub pitch_offset: f64,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    /// One-pole low-pass coefficient in `[0, 1)`.
    pub smoothing: f64,
}

impl NuisanceRecord {
    pub fn get(&self, kind: NuisanceKind) -> f64 {
        match kind {
            NuisanceKind::Gain => self.gain,
            NuisanceKind::PitchOffset => self.pitch_offset,
            NuisanceKind::AdditiveNoise => self.noise_level,
            NuisanceKind::Smoothing => self.smoothing,
        }
    }

    pub fn with(mut self, kind: NuisanceKind, value: f64) -> Self {
        match kind {
            NuisanceKind::Gain => self.gain = value,
            NuisanceKind::PitchOffset => self.pitch_offset = value,
            NuisanceKind::AdditiveNoise => self.noise_level = value,
            NuisanceKind::Smoothing => self.smoothing = value,
        }
        self
    }
}

/// A rendered utterance with the transcript and nuisance that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub audio: Waveform,
    pub transcript: Vec<usize>,
    pub nuisance: NuisanceRecord,
    /// Seed of the additive-noise stream, so the audio can be re-rendered.
    pub noise_seed: u64,
}
