//! Reconstruction losses: RMS-normalized log-mel, multi-scale mel,
//! multi-resolution STFT and complex STFT with a phase term.

use autodiff::{Tensor, Var};

use crate::error::{Error, Result};
use crate::spectral::Spectral;

const RMS_EPS: f64 = 1e-12;
const UNIT_EPS: f64 = 1e-12;
const SC_EPS: f64 = 1e-12;

/// The four reconstruction terms, unweighted.
#[derive(Clone, Copy)]
pub struct ReconTerms<'t> {
    pub mel: Var<'t>,
    pub ms_mel: Var<'t>,
    pub mr_stft: Var<'t>,
    pub cstft: Var<'t>,
}

fn unit_rms(x: Var<'_>) -> Var<'_> {
    x / x.square().mean().add_scalar(RMS_EPS).sqrt()
}

fn mean_abs_diff<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// Spectral convergence plus log-magnitude l1 at one resolution.
fn stft_mag_terms<'t>(spec: &Spectral, x: Var<'t>, y: Var<'t>, fft: usize) -> Var<'t> {
    let hop = fft / spec.cfg.hop_divisor;
    let (xr, xi) = spec.stft(x, fft, hop);
    let (yr, yi) = spec.stft(y, fft, hop);
    let mx = (xr.square() + xi.square()).sqrt();
    let my = (yr.square() + yi.square()).sqrt();
    let num = (mx - my).square().sum().sqrt();
    let den = mx.square().sum().sqrt().add_scalar(SC_EPS);
    let floor = spec.cfg.log_floor;
    num / den + mean_abs_diff(mx.add_scalar(floor).ln(), my.add_scalar(floor).ln())
}

/// Complex distance plus weighted unit-phasor distance at one resolution.
/// The phase term only covers bins where the reference magnitude reaches
/// the mask threshold.
fn complex_terms<'t>(spec: &Spectral, x: Var<'t>, y: Var<'t>, fft: usize) -> Var<'t> {
    let hop = fft / spec.cfg.hop_divisor;
    let (xr, xi) = spec.stft(x, fft, hop);
    let (yr, yi) = spec.stft(y, fft, hop);
    let dr = xr - yr;
    let di = xi - yi;
    let base = (dr.square() + di.square()).sqrt().mean();

    let mag_x = (xr.square() + xi.square()).add_scalar(UNIT_EPS).sqrt();
    let mag_y = (yr.square() + yi.square()).add_scalar(UNIT_EPS).sqrt();
    let ur = xr / mag_x - yr / mag_y;
    let ui = xi / mag_x - yi / mag_y;
    let ref_mag = {
        let r = xr.value();
        let i = xi.value();
        r.zip_map(&i, |a, b| (a * a + b * b).sqrt())
    };
    let mask = ref_mag.map(|m| if m >= spec.cfg.phase_mask { 1.0 } else { 0.0 });
    let kept = mask.sum();
    if kept == 0.0 {
        return base;
    }
    let phase = (ur.square() + ui.square()).sqrt().mul_const(&mask).sum().scale(1.0 / kept);
    base + phase.scale(spec.cfg.phase_weight)
}

/// The four reconstruction terms between reference `x` and estimate `x_hat`
/// (both `[N]`).
pub fn recon_loss<'t>(spec: &Spectral, x: Var<'t>, x_hat: Var<'t>) -> Result<ReconTerms<'t>> {
    let (nx, ny) = (x.shape(), x_hat.shape());
    if nx != ny || nx.len() != 1 {
        return Err(Error::Shape(format!("recon loss needs equal 1-D signals, got {nx:?} and {ny:?}")));
    }
    if nx[0] < spec.cfg.min_len() {
        return Err(Error::Shape(format!(
            "signals of {} samples are shorter than the largest fft {}",
            nx[0],
            spec.cfg.min_len()
        )));
    }
    let c = &spec.cfg;
    let mel = mean_abs_diff(
        spec.log_mel_var(unit_rms(x), c.mel_bins, c.mel_fft, c.mel_hop),
        spec.log_mel_var(unit_rms(x_hat), c.mel_bins, c.mel_fft, c.mel_hop),
    );
    let mut ms_mel = Vec::new();
    let mut mr = Vec::new();
    let mut cs = Vec::new();
    for &fft in &c.fft_sizes {
        let hop = fft / c.hop_divisor;
        ms_mel.push(mean_abs_diff(
            spec.log_mel_var(x, c.ms_mel_bins, fft, hop),
            spec.log_mel_var(x_hat, c.ms_mel_bins, fft, hop),
        ));
        mr.push(stft_mag_terms(spec, x, x_hat, fft));
        cs.push(complex_terms(spec, x, x_hat, fft));
    }
    let total = |v: Vec<Var<'t>>| v.into_iter().reduce(|a, b| a + b).expect("at least one fft size");
    Ok(ReconTerms {
        mel,
        ms_mel: total(ms_mel),
        mr_stft: total(mr),
        cstft: total(cs),
    })
}

/// Plain-value convenience wrapper.
pub fn recon_values(spec: &Spectral, x: &[f64], x_hat: &[f64]) -> Result<[f64; 4]> {
    let tape = autodiff::Tape::no_grad();
    let a = tape.constant(Tensor::new(&[x.len()], x.to_vec()));
    let b = tape.constant(Tensor::new(&[x_hat.len()], x_hat.to_vec()));
    let t = recon_loss(spec, a, b)?;
    Ok([t.mel.item(), t.ms_mel.item(), t.mr_stft.item(), t.cstft.item()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralConfig;

    fn spec() -> Spectral {
        Spectral::new(SpectralConfig::default(), 16_000).unwrap()
    }

    fn tone(n: usize, f: f64, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin() + 0.01 * ((i * 7919 % 101) as f64 / 101.0 - 0.5))
            .collect()
    }

    #[test]
    fn identical_signals_cost_nothing() {
        let x = tone(4096, 330.0, 0.5);
        assert_eq!(recon_values(&spec(), &x, &x).unwrap(), [0.0; 4]);
    }

    #[test]
    fn mel_term_ignores_pure_gain() {
        let x = tone(4096, 330.0, 0.5);
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let v = recon_values(&spec(), &x, &y).unwrap();
        assert!(v[0].abs() < 1e-8, "{v:?}");
        assert!(v[1] > 0.0 && v[2] > 0.0 && v[3] > 0.0);
    }

    #[test]
    fn sine_against_silence_is_positive_everywhere() {
        let x = tone(4096, 330.0, 0.5);
        let v = recon_values(&spec(), &x, &vec![0.0; 4096]).unwrap();
        assert!(v.iter().all(|&t| t > 0.0), "{v:?}");
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        assert!(matches!(
            recon_values(&spec(), &vec![0.0; 4096], &vec![0.0; 4000]),
            Err(Error::Shape(_))
        ));
    }
}
