//! Staggered three-phase schedule and composition of the total loss.

use serde::{Deserialize, Serialize};

use crate::adversarial::GanGateState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub bridge: f64,
    pub ftp: f64,
    pub cos: f64,
    pub ctr: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            bridge: 1.0,
            ftp: 0.2,
            cos: 0.1,
            ctr: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconWeights {
    pub mel: f64,
    pub ms_mel: f64,
    pub mr_stft: f64,
    pub cstft: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            mel: 1.5,
            ms_mel: 0.5,
            mr_stft: 0.5,
            cstft: 0.8,
        }
    }
}

/// Step boundaries are given at full scale and multiplied by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub d_only_until: u64,
    pub ftp_delay: u64,
    pub ftp_warmup: u64,
    pub sa_delay: u64,
    pub sa_warmup: u64,
    pub scale: f64,
    pub lambdas: Lambdas,
    pub recon: ReconWeights,
    pub commitment_weight: f64,
    pub generator_weight: f64,
    pub grad_clip: f64,
    pub ramp: RampShape,
    /// Optional linear learning-rate warmup, in full-scale steps.
    pub lr_warmup: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 25_000,
            d_only_until: 10_000,
            ftp_delay: 10_000,
            ftp_warmup: 2_000,
            sa_delay: 12_000,
            sa_warmup: 2_000,
            scale: 1.0,
            lambdas: Lambdas::default(),
            recon: ReconWeights::default(),
            commitment_weight: 0.25,
            generator_weight: 1.0,
            grad_clip: 15.0,
            ramp: RampShape::Linear,
            lr_warmup: None,
        }
    }
}

/// Boundaries after scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries {
    pub total: u64,
    pub d_only_until: u64,
    pub ftp_delay: u64,
    pub ftp_warmup: u64,
    pub sa_delay: u64,
    pub sa_warmup: u64,
}

impl ScheduleConfig {
    pub fn boundaries(&self) -> Boundaries {
        let s = |v: u64| (v as f64 * self.scale).round() as u64;
        Boundaries {
            total: s(self.total_steps),
            d_only_until: s(self.d_only_until),
            ftp_delay: s(self.ftp_delay),
            ftp_warmup: s(self.ftp_warmup),
            sa_delay: s(self.sa_delay),
            sa_warmup: s(self.sa_warmup),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("schedule scale {} must be positive", self.scale)));
        }
        let b = self.boundaries();
        if !(b.d_only_until <= b.ftp_delay && b.ftp_delay <= b.sa_delay && b.sa_delay <= b.total) {
            return Err(Error::Config(format!(
                "schedule boundaries out of order: d-only {} ftp {} sa {} total {}",
                b.d_only_until, b.ftp_delay, b.sa_delay, b.total
            )));
        }
        if b.ftp_warmup == 0 || b.sa_warmup == 0 {
            return Err(Error::Config("objective warmups must be at least one step".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub phase: u8,
    pub lambdas: Lambdas,
    pub codec_opt_active: bool,
    pub gan_gate: GanGateState,
}

fn ramp(step: u64, delay: u64, warmup: u64, target: f64, shape: RampShape) -> f64 {
    if step <= delay {
        return 0.0;
    }
    let f = ((step - delay) as f64 / warmup as f64).min(1.0);
    let f = match shape {
        RampShape::Linear => f,
        RampShape::Cosine => 0.5 - 0.5 * (std::f64::consts::PI * f).cos(),
    };
    if f >= 1.0 {
        target
    } else {
        target * f
    }
}

/// Phase, ramped weights and optimizer flags at `step`.
pub fn schedule_at(step: u64, cfg: &ScheduleConfig) -> Result<ScheduleState> {
    let b = cfg.boundaries();
    if step > b.total {
        return Err(Error::Contract(format!("step {step} beyond the {} scheduled steps", b.total)));
    }
    let phase = if step < b.d_only_until {
        1
    } else if step < b.sa_delay {
        2
    } else {
        3
    };
    let l = cfg.lambdas;
    Ok(ScheduleState {
        step,
        phase,
        lambdas: Lambdas {
            bridge: l.bridge,
            ftp: ramp(step, b.ftp_delay, b.ftp_warmup, l.ftp, cfg.ramp),
            cos: ramp(step, b.sa_delay, b.sa_warmup, l.cos, cfg.ramp),
            ctr: ramp(step, b.sa_delay, b.sa_warmup, l.ctr, cfg.ramp),
        },
        codec_opt_active: step >= b.d_only_until,
        gan_gate: GanGateState::default(),
    })
}

/// Learning-rate multiplier under the optional warmup.
pub fn lr_scale_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    match cfg.lr_warmup {
        Some(w) if w > 0 => {
            let w = (w as f64 * cfg.scale).round().max(1.0);
            ((step + 1) as f64 / w).min(1.0)
        }
        _ => 1.0,
    }
}

/// Raw (unweighted) loss terms of one step, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel: f64,
    pub ms_mel: f64,
    pub mr_stft: f64,
    pub cstft: f64,
    pub commit: f64,
    pub gen: f64,
    pub fm: f64,
    pub bridge: f64,
    pub ftp: f64,
    pub cos: f64,
    pub ctr: f64,
    pub total: f64,
}

/// Multipliers applied to each raw term, in [`LossBreakdown`] field order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub mel: f64,
    pub ms_mel: f64,
    pub mr_stft: f64,
    pub cstft: f64,
    pub commit: f64,
    pub gen: f64,
    pub fm: f64,
    pub bridge: f64,
    pub ftp: f64,
    pub cos: f64,
    pub ctr: f64,
}

/// Weights for the current state; GAN terms drop to zero while gated.
pub fn term_weights(state: &ScheduleState, cfg: &ScheduleConfig, gan_on: bool) -> TermWeights {
    let r = cfg.recon;
    let l = state.lambdas;
    let (gen, fm) = if gan_on {
        (cfg.generator_weight, state.gan_gate.fm_weight)
    } else {
        (0.0, 0.0)
    };
    TermWeights {
        mel: r.mel,
        ms_mel: r.ms_mel,
        mr_stft: r.mr_stft,
        cstft: r.cstft,
        commit: cfg.commitment_weight,
        gen,
        fm,
        bridge: l.bridge,
        ftp: l.ftp,
        cos: l.cos,
        ctr: l.ctr,
    }
}

impl TermWeights {
    pub fn as_array(&self) -> [f64; 11] {
        [
            self.mel, self.ms_mel, self.mr_stft, self.cstft, self.commit, self.gen, self.fm, self.bridge, self.ftp, self.cos,
            self.ctr,
        ]
    }
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 11] {
        [
            self.mel, self.ms_mel, self.mr_stft, self.cstft, self.commit, self.gen, self.fm, self.bridge, self.ftp, self.cos,
            self.ctr,
        ]
    }

    pub const NAMES: [&'static str; 11] = [
        "mel", "ms_mel", "mr_stft", "cstft", "commit", "gen", "fm", "bridge", "ftp", "cos", "ctr",
    ];
}

/// Weighted sum of the raw terms. Terms with zero weight are ignored even
/// when non-finite; a non-finite contributing term is an error.
pub fn total_loss(parts: &LossBreakdown, state: &ScheduleState, cfg: &ScheduleConfig, gan_on: bool) -> Result<(f64, LossBreakdown)> {
    let w = term_weights(state, cfg, gan_on).as_array();
    let mut total = 0.0;
    for ((v, w), name) in parts.terms().iter().zip(w).zip(LossBreakdown::NAMES) {
        if w == 0.0 {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        total += w * v;
    }
    let mut out = *parts;
    out.total = total;
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_boundaries() {
        let cfg = ScheduleConfig::default();
        let s = schedule_at(5000, &cfg).unwrap();
        assert_eq!((s.phase, s.codec_opt_active, s.lambdas.ftp), (1, false, 0.0));
        assert!((schedule_at(11_000, &cfg).unwrap().lambdas.ftp - 0.1).abs() < 1e-12);
        let l = schedule_at(14_000, &cfg).unwrap().lambdas;
        assert_eq!((l.ftp, l.cos, l.ctr), (0.2, 0.1, 0.05));
        assert_eq!(schedule_at(9_999, &cfg).unwrap().lambdas.ftp, 0.0);
        assert_eq!(schedule_at(12_000, &cfg).unwrap().lambdas.ftp, 0.2);
        assert_eq!(schedule_at(10_000, &cfg).unwrap().phase, 2);
        assert_eq!(schedule_at(12_000, &cfg).unwrap().phase, 3);
        assert!(matches!(schedule_at(25_001, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn scaled_schedule_divides_boundaries() {
        let cfg = ScheduleConfig { scale: 0.1, ..Default::default() };
        let b = cfg.boundaries();
        assert_eq!((b.total, b.d_only_until, b.ftp_warmup, b.sa_delay), (2500, 1000, 200, 1200));
        assert_eq!(schedule_at(1200, &cfg).unwrap().lambdas.ftp, 0.2);
    }

    #[test]
    fn weighted_total_reference() {
        let cfg = ScheduleConfig::default();
        let state = schedule_at(14_000, &cfg).unwrap();
        let ones = LossBreakdown {
            mel: 1.0,
            ms_mel: 1.0,
            mr_stft: 1.0,
            cstft: 1.0,
            commit: 1.0,
            gen: 1.0,
            fm: 1.0,
            bridge: 1.0,
            ftp: 1.0,
            cos: 1.0,
            ctr: 1.0,
            total: 0.0,
        };
        let (t, b) = total_loss(&ones, &state, &cfg, false).unwrap();
        assert!((t - 4.90).abs() < 1e-12 && (b.total - t).abs() < 1e-6);
        let early = schedule_at(100, &cfg).unwrap();
        let (t1, _) = total_loss(&ones, &early, &cfg, false).unwrap();
        assert!((t1 - 4.55).abs() < 1e-12);
        let bad = LossBreakdown { ftp: f64::NAN, ..ones };
        assert!(total_loss(&bad, &early, &cfg, false).is_ok());
        assert!(matches!(total_loss(&bad, &state, &cfg, false), Err(Error::NonFinite(_))));
    }
}
