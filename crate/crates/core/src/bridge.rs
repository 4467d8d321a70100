//! Differentiable bridge from codec latents to LM input embeddings:
//! hard Gumbel-Softmax with straight-through gradients.

use autodiff::{Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGIT_CLAMP: f64 = 80.0;
const UNIFORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_steps: u64,
    /// Largest waveform shift, in samples, applied to the LM branch.
    pub max_jitter: usize,
    /// Fraction of LM-context tokens replaced by random ids.
    pub code_noise: f64,
    /// Bridge cross-entropy targets the clean tokens rather than the
    /// noised context.
    pub ce_on_clean_tokens: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            tau_start: 1.0,
            tau_end: 0.3,
            tau_steps: 20_000,
            max_jitter: 24,
            code_noise: 0.015,
            ce_on_clean_tokens: true,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must satisfy start >= end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.tau_steps == 0 {
            return Err(Error::Config("temperature schedule needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.code_noise) {
            return Err(Error::Config("code noise fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `tau_start` to `tau_end` over `tau_steps`.
pub fn temperature(step: u64, cfg: &BridgeConfig) -> f64 {
    let frac = step.min(cfg.tau_steps) as f64 / cfg.tau_steps as f64;
    cfg.tau_end + (cfg.tau_start - cfg.tau_end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Standard Gumbel draws `-ln(-ln(u))`.
pub fn gumbel_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(UNIFORM_GUARD, 1.0 - UNIFORM_GUARD);
            -(-u.ln()).ln()
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct BridgeOutput<'t> {
    /// Clamped logits `[T, V]`.
    pub logits: Var<'t>,
    /// The relaxed sample `softmax(logits / tau + noise)`.
    pub soft: Var<'t>,
    /// Exactly one-hot rows in the forward pass, soft-softmax gradient.
    pub one_hot: Var<'t>,
    pub ids: Vec<usize>,
    /// `one_hot @ E_audio`, `[T, H]`.
    pub embeddings: Var<'t>,
}

/// Straight-through hard sample of `softmax(logits / tau + noise)`, so
/// noisy selections follow `softmax(logits / tau)`.
pub fn straight_through<'t>(logits: Var<'t>, noise: Option<&[f64]>, tau: f64) -> (Var<'t>, Vec<usize>) {
    let (_, y, ids) = relaxed_and_hard(logits, noise, tau);
    (y, ids)
}

/// The relaxed sample, its straight-through hard version and the ids.
fn relaxed_and_hard<'t>(logits: Var<'t>, noise: Option<&[f64]>, tau: f64) -> (Var<'t>, Var<'t>, Vec<usize>) {
    let lv = logits.value();
    let (t, v) = (lv.dim(0), lv.dim(1));
    let scaled = logits.scale(1.0 / tau);
    let perturbed = match noise {
        Some(g) => {
            assert_eq!(g.len(), t * v, "one noise value per logit");
            scaled.add_const(&Tensor::new(&[t, v], g.to_vec()))
        }
        None => scaled,
    };
    let soft = perturbed.softmax_last();
    let pv = perturbed.value();
    let ids: Vec<usize> = (0..t).map(|r| argmax(pv.row(r))).collect();
    let mut hard = Tensor::zeros(&[t, v]);
    for (r, &k) in ids.iter().enumerate() {
        hard.data_mut()[r * v + k] = 1.0;
    }
    let y = logits.tape().constant(hard) + (soft - soft.detach());
    (soft, y, ids)
}

/// Latents `z` (`[T, C]`) to logits, hard one-hot samples and embeddings.
/// Noise is drawn from `rng` when one is supplied.
pub fn bridge_forward<'t, R: Rng>(
    z: Var<'t>,
    w_bridge: Var<'t>,
    e_audio: Var<'t>,
    tau: f64,
    rng: Option<&mut R>,
) -> Result<BridgeOutput<'t>> {
    if !z.value().all_finite() {
        return Err(Error::NonFinite("bridge input latents".into()));
    }
    let logits = z.matmul(w_bridge).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let noise = rng.map(|r| gumbel_noise(r, logits.value().numel()));
    let (soft, one_hot, ids) = relaxed_and_hard(logits, noise.as_deref(), tau);
    Ok(BridgeOutput {
        logits,
        soft,
        one_hot,
        ids,
        embeddings: one_hot.matmul(e_audio),
    })
}

/// Mean cross-entropy of bridge logits against the quantizer's tokens.
pub fn bridge_ce<'t>(logits: Var<'t>, tokens: &[usize]) -> Result<Var<'t>> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != tokens.len() {
        return Err(Error::Shape(format!("logits {sh:?} do not match {} tokens", tokens.len())));
    }
    if let Some(&bad) = tokens.iter().find(|&&k| k >= sh[1]) {
        return Err(Error::Index(format!("token {bad} outside vocabulary of {}", sh[1])));
    }
    Ok(logits.cross_entropy(tokens))
}

/// Replaces rows of `y` at `positions` with one-hots at `ids`. Replaced rows
/// carry no gradient.
pub fn apply_code_noise<'t>(y: Var<'t>, replaced: &[(usize, usize)]) -> Var<'t> {
    if replaced.is_empty() {
        return y;
    }
    let sh = y.shape();
    let (t, v) = (sh[0], sh[1]);
    let mut keep = Tensor::ones(&[t, v]);
    let mut fill = Tensor::zeros(&[t, v]);
    for &(pos, id) in replaced {
        keep.row_mut(pos).fill(0.0);
        fill.data_mut()[pos * v + id] = 1.0;
    }
    y.mul_const(&keep).add_const(&fill)
}

/// Number of tokens code noise replaces in a sequence of `t`.
pub fn code_noise_count(t: usize, fraction: f64) -> usize {
    (fraction * t as f64 + 0.5).floor() as usize
}

/// LM-branch augmentation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub jittered: Vec<f64>,
    pub offset: i64,
    pub noised: Vec<usize>,
    /// `(position, new id)` pairs.
    pub replaced: Vec<(usize, usize)>,
}

/// Shifts `samples` by a uniform offset in `[-max_jitter, max_jitter]`
/// with zero fill and replaces `round(code_noise * T)` tokens with uniform
/// random ids.
pub fn lm_branch_augment(
    samples: &[f64],
    tokens: &[usize],
    vocab: usize,
    cfg: &BridgeConfig,
    rng: &mut impl Rng,
) -> Augmentation {
    let j = cfg.max_jitter as i64;
    let offset = rng.gen_range(-j..=j);
    let n = samples.len() as i64;
    let jittered = (0..n)
        .map(|i| {
            let src = i - offset;
            if (0..n).contains(&src) {
                samples[src as usize]
            } else {
                0.0
            }
        })
        .collect();
    let count = code_noise_count(tokens.len(), cfg.code_noise).min(tokens.len());
    let mut positions = sample(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let replaced: Vec<(usize, usize)> = positions.into_iter().map(|p| (p, rng.gen_range(0..vocab))).collect();
    let mut noised = tokens.to_vec();
    for &(p, id) in &replaced {
        noised[p] = id;
    }
    Augmentation {
        jittered,
        offset,
        noised,
        replaced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Tape;

    #[test]
    fn temperature_endpoints_and_midpoint() {
        let c = BridgeConfig::default();
        assert_eq!(temperature(0, &c), 1.0);
        assert!((temperature(20_000, &c) - 0.3).abs() < 1e-15);
        assert!((temperature(50_000, &c) - 0.3).abs() < 1e-15);
        assert!((temperature(10_000, &c) - 0.65).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in (0..21_000).step_by(250) {
            let t = temperature(s, &c);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn noiseless_sample_is_the_argmax() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[1, 3], vec![5.0, 0.0, 0.0]));
        let (y, ids) = straight_through(l, None, 0.3);
        assert_eq!(ids, vec![0]);
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_exactly_one_hot_with_noise() {
        let tape = Tape::new();
        let mut rng = crate::rng::stream(4, &[]);
        let z = tape.leaf(Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.7).sin()));
        let w = tape.leaf(Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.3).cos() * 200.0));
        let e = tape.leaf(Tensor::from_fn(&[5, 4], |i| i as f64));
        let out = bridge_forward(z, w, e, 0.5, Some(&mut rng)).unwrap();
        assert!(out.logits.value().max_abs() <= 80.0);
        let y = out.one_hot.value();
        for r in 0..6 {
            assert_eq!(y.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(y.row(r).iter().filter(|&&v| v == 0.0).count(), 4);
        }
        assert_eq!(out.embeddings.shape(), vec![6, 4]);
    }

    #[test]
    fn bridge_ce_reference_values() {
        let tape = Tape::new();
        let mut l = Tensor::full(&[2, 4], -80.0);
        l.data_mut()[1] = 80.0;
        l.data_mut()[4 + 3] = 80.0;
        assert!(bridge_ce(tape.constant(l), &[1, 3]).unwrap().item() < 1e-6);
        let u = tape.constant(Tensor::zeros(&[3, 256]));
        assert!((bridge_ce(u, &[0, 1, 2]).unwrap().item() - 256f64.ln()).abs() < 1e-12);
        assert!(matches!(bridge_ce(u, &[0, 1, 256]), Err(Error::Index(_))));
    }

    #[test]
    fn code_noise_replaces_round_half_up_count() {
        assert_eq!(code_noise_count(200, 0.015), 3);
        assert_eq!(code_noise_count(100, 0.015), 2);
        assert_eq!(code_noise_count(10, 0.015), 0);
        let mut rng = crate::rng::stream(1, &[]);
        let tokens: Vec<usize> = (0..200).map(|i| i % 7).collect();
        let a = lm_branch_augment(&vec![0.5; 640], &tokens, 256, &BridgeConfig::default(), &mut rng);
        assert_eq!(a.replaced.len(), 3);
        assert!(a.offset.abs() <= 24);
    }

    #[test]
    fn zero_offset_leaves_waveform_and_noise_rows_carry_no_gradient() {
        let cfg = BridgeConfig {
            max_jitter: 0,
            ..BridgeConfig::default()
        };
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = lm_branch_augment(&x, &[1, 2], 4, &cfg, &mut crate::rng::stream(0, &[]));
        assert_eq!(a.jittered, x);
        let tape = Tape::new();
        let y = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let noised = apply_code_noise(y, &[(1, 2)]);
        assert_eq!(noised.value().row(1), &[0.0, 0.0, 1.0]);
        let g = noised.sum().backward().get_or_zeros(y);
        assert_eq!(g.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(g.row(0), &[1.0, 1.0, 1.0]);
    }
}
