//! Mel filterbanks and differentiable spectral features.

use std::collections::HashMap;

use autodiff::{StftPlan, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub mel_bins: usize,
    pub mel_fft: usize,
    pub mel_hop: usize,
    pub ms_mel_bins: usize,
    pub fft_sizes: Vec<usize>,
    /// Multi-resolution hop is `fft / hop_divisor`.
    pub hop_divisor: usize,
    pub phase_weight: f64,
    pub log_floor: f64,
    /// Reference magnitude below which phase is ignored.
    pub phase_mask: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            mel_bins: 100,
            mel_fft: 1024,
            mel_hop: 256,
            ms_mel_bins: 80,
            fft_sizes: vec![512, 1024, 2048],
            hop_divisor: 4,
            phase_weight: 0.5,
            log_floor: 1e-5,
            phase_mask: 1e-4,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        for &n in self.fft_sizes.iter().chain([&self.mel_fft]) {
            if !n.is_power_of_two() {
                return Err(Error::Config(format!("fft size {n} is not a power of two")));
            }
        }
        if self.mel_hop == 0 || self.mel_hop >= self.mel_fft {
            return Err(Error::Config("mel hop must be positive and below the fft size".into()));
        }
        if self.hop_divisor < 2 {
            return Err(Error::Config("hop divisor must be at least 2".into()));
        }
        if self.mel_bins == 0 || self.ms_mel_bins == 0 || self.fft_sizes.is_empty() {
            return Err(Error::Config("mel bins and fft sizes must be non-empty".into()));
        }
        Ok(())
    }

    /// Shortest signal every term accepts.
    pub fn min_len(&self) -> usize {
        self.fft_sizes.iter().copied().chain([self.mel_fft]).max().unwrap_or(0)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `bins` triangular filters spanning 0 to Nyquist.
pub fn mel_centers(bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=bins).map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64)).collect()
}

/// `[fft/2 + 1, bins]` triangular filterbank, each filter scaled to unit
/// area in Hz (`2 / (right - left)` peak).
pub fn mel_filterbank(bins: usize, n_fft: usize, sample_rate: u32) -> Tensor {
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let mut fb = Tensor::zeros(&[n_bins, bins]);
    for k in 0..n_bins {
        let f = k as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..bins {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.data_mut()[k * bins + m] = w * 2.0 / (r - l);
        }
    }
    fb
}

/// Cached STFT plans and filterbanks for one sample rate.
#[derive(Clone, Debug)]
pub struct Spectral {
    pub cfg: SpectralConfig,
    pub sample_rate: u32,
    plans: HashMap<(usize, usize), StftPlan>,
    banks: HashMap<(usize, usize), Tensor>,
}

impl Spectral {
    pub fn new(cfg: SpectralConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let mut s = Self {
            cfg,
            sample_rate,
            plans: HashMap::new(),
            banks: HashMap::new(),
        };
        let (bins, fft, hop) = (s.cfg.mel_bins, s.cfg.mel_fft, s.cfg.mel_hop);
        s.ensure(fft, hop, Some(bins));
        for fft in s.cfg.fft_sizes.clone() {
            let ms = s.cfg.ms_mel_bins;
            s.ensure(fft, fft / s.cfg.hop_divisor, Some(ms));
        }
        Ok(s)
    }

    fn ensure(&mut self, fft: usize, hop: usize, bins: Option<usize>) {
        self.plans
            .entry((fft, hop))
            .or_insert_with(|| StftPlan::hann_normalized(fft, hop));
        if let Some(b) = bins {
            let sr = self.sample_rate;
            self.banks.entry((b, fft)).or_insert_with(|| mel_filterbank(b, fft, sr));
        }
    }

    pub fn plan(&self, fft: usize, hop: usize) -> &StftPlan {
        self.plans
            .get(&(fft, hop))
            .unwrap_or_else(|| panic!("no STFT plan for fft {fft} hop {hop}"))
    }

    fn bank(&self, bins: usize, fft: usize) -> &Tensor {
        self.banks
            .get(&(bins, fft))
            .unwrap_or_else(|| panic!("no filterbank for {bins} bins at fft {fft}"))
    }

    /// Centered STFT of a 1-D signal: reflect padding of `fft / 2` each side.
    /// Returns `(re, im)`, each `[frames, bins]`.
    pub fn stft<'t>(&self, x: Var<'t>, fft: usize, hop: usize) -> (Var<'t>, Var<'t>) {
        let s = x.reflect_pad_last(fft / 2, fft / 2).stft(self.plan(fft, hop));
        let sh = s.shape();
        let (f, b) = (sh[1], sh[2]);
        (s.narrow(0, 0, 1).reshape(&[f, b]), s.narrow(0, 1, 1).reshape(&[f, b]))
    }

    /// `log(mel(|X|^2) + floor)`, `[frames, bins]`.
    pub fn log_mel_var<'t>(&self, x: Var<'t>, bins: usize, fft: usize, hop: usize) -> Var<'t> {
        let (re, im) = self.stft(x, fft, hop);
        let power = re.square() + im.square();
        let fb = x.tape().constant(self.bank(bins, fft).clone());
        power.matmul(fb).add_scalar(self.cfg.log_floor).ln()
    }
}

/// Log-mel matrix of a waveform.
pub fn log_mel(w: &Waveform, bins: usize, fft: usize, hop: usize) -> Result<Tensor> {
    if w.len() < fft {
        return Err(Error::Shape(format!("signal of {} samples shorter than fft {fft}", w.len())));
    }
    let cfg = SpectralConfig {
        mel_bins: bins,
        mel_fft: fft,
        mel_hop: hop,
        ..SpectralConfig::default()
    };
    let mut s = Spectral {
        cfg,
        sample_rate: w.sample_rate(),
        plans: HashMap::new(),
        banks: HashMap::new(),
    };
    s.ensure(fft, hop, Some(bins));
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(&[w.len()], w.samples().to_vec()));
    Ok((*s.log_mel_var(x, bins, fft, hop).value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_have_unit_area_and_span_to_nyquist() {
        let fb = mel_filterbank(40, 4096, 16_000);
        let df = 16_000.0 / 4096.0;
        for m in 0..40 {
            let area: f64 = (0..fb.dim(0)).map(|k| fb.at2(k, m)).sum::<f64>() * df;
            assert!((area - 1.0).abs() < 0.05, "filter {m} area {area}");
        }
        let c = mel_centers(40, 16_000);
        assert!(c[39] < 8000.0 && c[39] > 7000.0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let m = log_mel(&Waveform::silence(2048, 16_000).unwrap(), 100, 1024, 256).unwrap();
        assert!(m.data().iter().all(|&v| v == 1e-5f64.ln()));
        assert_eq!(m.shape(), &[9, 100]);
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let x: Vec<f64> = (0..8192)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let m = log_mel(&Waveform::new(x, 16_000).unwrap(), 100, 1024, 256).unwrap();
        let centers = mel_centers(100, 16_000);
        let nearest = (0..100)
            .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
            .unwrap();
        let frame = m.dim(0) / 2;
        let row = m.row(frame);
        let peak = (0..100).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, nearest);
    }

    #[test]
    fn short_input_is_a_shape_error() {
        let w = Waveform::silence(1000, 16_000).unwrap();
        assert!(matches!(log_mel(&w, 100, 1024, 256), Err(Error::Shape(_))));
    }
}
