//! Short-time Fourier transform as a differentiable op.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tape::Var;
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame geometry of an STFT without implicit padding.
#[derive(Clone, Debug)]
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    /// Multiplier applied to every coefficient.
    pub scale: f64,
}

impl StftPlan {
    /// Periodic-Hann STFT scaled by `1 / sqrt(sum(w^2))`.
    pub fn hann_normalized(n_fft: usize, hop: usize) -> Self {
        let window = hann_periodic(n_fft);
        let scale = 1.0 / window.iter().map(|w| w * w).sum::<f64>().sqrt();
        Self {
            n_fft,
            hop,
            window,
            scale,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        assert!(len >= self.n_fft, "signal of {len} samples shorter than n_fft {}", self.n_fft);
        (len - self.n_fft) / self.hop + 1
    }

    /// Forward transform of raw samples into `[2, frames, bins]`
    /// (real parts, then imaginary parts).
    pub fn forward(&self, x: &[f64]) -> Tensor {
        let n = self.n_fft;
        let frames = self.frames(x.len());
        let bins = self.bins();
        let fft = plan(n, false);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut out = vec![0.0; 2 * frames * bins];
        let (re, im) = out.split_at_mut(frames * bins);
        for f in 0..frames {
            let seg = &x[f * self.hop..f * self.hop + n];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            for k in 0..bins {
                re[f * bins + k] = buf[k].re * self.scale;
                im[f * bins + k] = buf[k].im * self.scale;
            }
        }
        Tensor::new(&[2, frames, bins], out)
    }

    /// Adjoint of [`StftPlan::forward`]: maps a `[2, frames, bins]` cotangent
    /// back onto `len` samples.
    pub fn adjoint(&self, g: &Tensor, len: usize) -> Vec<f64> {
        let n = self.n_fft;
        let frames = g.dim(1);
        let bins = g.dim(2);
        let ifft = plan(n, true);
        let (gre, gim) = g.data().split_at(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut dx = vec![0.0; len];
        for f in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < bins {
                    Complex::new(gre[f * bins + k], gim[f * bins + k])
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            ifft.process(&mut buf);
            let off = f * self.hop;
            for i in 0..n {
                dx[off + i] += self.scale * self.window[i] * buf[i].re;
            }
        }
        dx
    }
}

impl<'t> Var<'t> {
    /// STFT of a 1-D signal into `[2, frames, bins]`; no implicit padding.
    pub fn stft(self, plan: &StftPlan) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 1, "stft expects a 1-D signal, got {:?}", x.shape());
        let out = plan.forward(x.data());
        let len = x.numel();
        let plan = Rc::new(plan.clone());
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::new(&[len], plan.adjoint(g, len)))]),
        )
    }
}
