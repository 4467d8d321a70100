//! Semantic alignment between the audio and transcript branches of the
//! frozen backbone: layer selection, pooling, cosine alignment and a
//! contrastive loss against a FIFO bank of past transcript vectors.

use std::collections::VecDeque;
use std::ops::RangeInclusive;

use autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaConfig {
    pub bank_capacity: usize,
    pub logit_scale: f64,
    pub label_smoothing: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            bank_capacity: 512,
            logit_scale: 5.0,
            label_smoothing: 0.1,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bank_capacity == 0 {
            return Err(Error::Config("memory bank capacity must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// 1-based block indices `floor(L/3) ..= floor(0.8 L)`.
pub fn select_layers(layers: usize) -> Result<RangeInclusive<usize>> {
    if layers < 3 {
        return Err(Error::Config(format!("alignment needs at least 3 layers, got {layers}")));
    }
    Ok(layers / 3..=(layers * 4) / 5)
}

/// Row `valid_len` (1-based) of `[T, H]` hidden states, as `[H]`.
pub fn pool_last<'t>(hidden: Var<'t>, valid_len: usize) -> Result<Var<'t>> {
    let shape = hidden.shape();
    if valid_len == 0 || valid_len > shape[0] {
        return Err(Error::Shape(format!("valid length {valid_len} outside 1..={}", shape[0])));
    }
    Ok(hidden.narrow(0, valid_len - 1, 1).reshape(&[shape[1]]))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_EPS {
        log::warn!("near-zero vector normalized with epsilon guard");
    }
    v.iter().map(|x| x / n.max(NORM_EPS)).collect()
}

/// Mean over layers of `1 - cos(audio, text)`. Text states are plain
/// tensors, so nothing flows back into the transcript branch.
pub fn cosine_align<'t>(tape: &'t Tape, audio: &[Var<'t>], text: &[Tensor]) -> Result<Var<'t>> {
    if audio.len() != text.len() || audio.is_empty() {
        return Err(Error::Shape(format!("{} audio layers vs {} text layers", audio.len(), text.len())));
    }
    let mut total = tape.scalar(0.0);
    for (a, t) in audio.iter().zip(text) {
        if a.value().sq_norm().sqrt() < NORM_EPS {
            log::warn!("near-zero audio state in cosine alignment");
        }
        let t = Tensor::new(t.shape(), normalized(t.data()));
        let cos = a.l2_normalize_last(NORM_EPS * NORM_EPS).mul_const(&t).sum();
        total = total + cos.scale(-1.0).add_scalar(1.0);
    }
    Ok(total.scale(1.0 / audio.len() as f64))
}

/// FIFO of unit-norm vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    /// Rebuilds a bank from stored unit vectors, oldest first, without
    /// renormalizing them.
    pub fn from_raw(capacity: usize, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Shape(format!("{} entries exceed capacity {capacity}", entries.len())));
        }
        if entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored memory bank".into()));
        }
        Ok(Self {
            capacity,
            entries: entries.into(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends the normalized vector, evicting the oldest entry when full.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("memory bank entry".into()));
        }
        self.entries.push_back(normalized(v));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy over the positive and every bank entry,
/// with logits `scale * cos`.
pub fn contrastive_loss<'t>(
    tape: &'t Tape,
    audio: Var<'t>,
    positive: &[f64],
    bank: &MemoryBank,
    scale: f64,
    smoothing: f64,
) -> Result<Var<'t>> {
    let h = positive.len();
    if audio.shape() != [h] {
        return Err(Error::Shape(format!("audio vector {:?} vs positive of {h}", audio.shape())));
    }
    if bank.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let n = 1 + bank.len();
    let mut keys = normalized(positive);
    for e in bank.entries() {
        if e.len() != h {
            return Err(Error::Shape(format!("bank entry of {} values vs hidden {h}", e.len())));
        }
        keys.extend_from_slice(e);
    }
    let mut target = vec![smoothing / n as f64; n];
    target[0] += 1.0 - smoothing;
    let logits = audio
        .l2_normalize_last(NORM_EPS * NORM_EPS)
        .reshape(&[1, h])
        .matmul_t(tape.constant(Tensor::new(&[n, h], keys)))
        .scale(scale);
    Ok(logits
        .log_softmax_last()
        .mul_const(&Tensor::new(&[1, n], target))
        .sum()
        .scale(-1.0))
}

/// Mean of the per-layer unit vectors, renormalized.
pub fn summary_vector<'t>(layers: &[Var<'t>]) -> Var<'t> {
    let mut acc = layers[0].l2_normalize_last(NORM_EPS * NORM_EPS);
    for l in &layers[1..] {
        acc = acc + l.l2_normalize_last(NORM_EPS * NORM_EPS);
    }
    acc.l2_normalize_last(NORM_EPS * NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ranges() {
        assert_eq!(select_layers(32).unwrap(), 10..=25);
        assert_eq!(select_layers(3).unwrap(), 1..=2);
        assert_eq!(select_layers(12).unwrap(), 4..=9);
        assert!(matches!(select_layers(2), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_picks_the_last_valid_row() {
        let tape = Tape::no_grad();
        let h = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        assert_eq!(pool_last(h, 4).unwrap().value().data(), &[6.0, 7.0]);
        assert_eq!(pool_last(h, 1).unwrap().value().data(), &[0.0, 1.0]);
        assert!(pool_last(h, 0).is_err() && pool_last(h, 5).is_err());
    }

    #[test]
    fn cosine_extremes() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]));
        let same = [Tensor::new(&[2], vec![2.0, 0.0])];
        let orth = [Tensor::new(&[2], vec![0.0, 3.0])];
        let opp = [Tensor::new(&[2], vec![-1.0, 0.0])];
        assert!(cosine_align(&tape, &[a], &same).unwrap().item().abs() < 1e-12);
        assert!((cosine_align(&tape, &[a], &orth).unwrap().item() - 1.0).abs() < 1e-12);
        assert!((cosine_align(&tape, &[a], &opp).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_reference_value() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]));
        let mut bank = MemoryBank::new(4);
        assert_eq!(contrastive_loss(&tape, a, &[1.0, 0.0], &bank, 5.0, 0.1).unwrap().item(), 0.0);
        bank.push(&[0.0, 1.0]).unwrap();
        let l = contrastive_loss(&tape, a, &[1.0, 0.0], &bank, 5.0, 0.1).unwrap().item();
        // Oracle: logits [5, 0], targets [0.95, 0.05].
        let lse = (5f64.exp() + 1.0).ln();
        let want = -(0.95 * (5.0 - lse) + 0.05 * (0.0 - lse));
        assert!((l - want).abs() < 1e-12 && (l - 0.2567).abs() < 1e-3);
    }

    #[test]
    fn bank_is_fifo_and_normalized() {
        let mut bank = MemoryBank::new(2);
        bank.push(&[3.0, 4.0]).unwrap();
        assert_eq!(bank.len(), 1);
        bank.push(&[0.0, 2.0]).unwrap();
        bank.push(&[5.0, 0.0]).unwrap();
        let e: Vec<&[f64]> = bank.entries().collect();
        assert_eq!(e, vec![&[0.0, 1.0][..], &[1.0, 0.0][..]]);
        assert!(bank.push(&[f64::NAN, 0.0]).is_err());
        let mut b = MemoryBank::new(3);
        b.push(&[3.0, 4.0]).unwrap();
        let n: f64 = b.entries().next().unwrap().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
