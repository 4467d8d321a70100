//! Multi-horizon future-token prediction heads.

use autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bridge::LOGIT_CLAMP;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `w_k` proportional to `1/k`, normalized to sum to one.
pub fn ftp_weights(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("future-token horizon count must be at least 1".into()));
    }
    let harmonic: f64 = (1..=k).map(|j| 1.0 / j as f64).sum();
    Ok((1..=k).map(|j| 1.0 / j as f64 / harmonic).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtpConfig {
    pub horizons: usize,
}

impl Default for FtpConfig {
    fn default() -> Self {
        Self { horizons: 5 }
    }
}

/// `K` bias-free linear heads mapping a hidden state to audio-token logits.
/// Each head is stored as `[V_audio, H]` under `ftp/head{k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FtpHeads {
    pub weights: Vec<f64>,
    pub params: ParamStore,
}

pub fn head_name(k: usize) -> String {
    format!("ftp/head{k}")
}

/// Every head starts as a copy of the audio rows of the output head.
pub fn init_heads(lm_head: &Tensor, audio_ids: &[usize], k: usize, hidden: usize) -> Result<FtpHeads> {
    let weights = ftp_weights(k)?;
    if lm_head.ndim() != 2 || lm_head.dim(1) != hidden {
        return Err(Error::Shape(format!(
            "output head of shape {:?} does not have hidden size {hidden}",
            lm_head.shape()
        )));
    }
    if let Some(&bad) = audio_ids.iter().find(|&&i| i >= lm_head.dim(0)) {
        return Err(Error::Shape(format!("audio row {bad} outside output head of {} rows", lm_head.dim(0))));
    }
    let mut rows = Vec::with_capacity(audio_ids.len() * hidden);
    for &i in audio_ids {
        rows.extend_from_slice(lm_head.row(i));
    }
    let slice = Tensor::new(&[audio_ids.len(), hidden], rows);
    let mut params = ParamStore::new();
    for j in 1..=k {
        params.insert(head_name(j), slice.clone());
    }
    Ok(FtpHeads { weights, params })
}

impl FtpHeads {
    pub fn horizons(&self) -> usize {
        self.weights.len()
    }

    /// Clamped logits of head `k` (1-based) for every row of `hidden`.
    pub fn logits<'t>(&self, tape: &'t Tape, hidden: Var<'t>, k: usize, trainable: bool) -> Var<'t> {
        hidden
            .matmul_t(self.params.bind(tape, &head_name(k), trainable))
            .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Weighted multi-step cross-entropy of `hidden` `[T, H]` against
    /// `targets` (length `T`), averaged over the `T - K` usable positions.
    pub fn loss<'t>(&self, tape: &'t Tape, hidden: Var<'t>, targets: &[usize], trainable: bool) -> Result<Var<'t>> {
        let k = self.horizons();
        let t = hidden.shape()[0];
        if targets.len() != t {
            return Err(Error::Shape(format!("{} targets for {t} hidden states", targets.len())));
        }
        if t <= k {
            return Err(Error::Shape(format!(
                "future-token loss needs at least {} positions, got {t}",
                k + 1
            )));
        }
        let vocab = self.params.get(&head_name(1)).dim(0);
        if let Some(&bad) = targets.iter().find(|&&c| c >= vocab) {
            return Err(Error::Index(format!("target {bad} outside audio vocabulary of {vocab}")));
        }
        let n = t - k;
        let rows = hidden.narrow(0, 0, n);
        let mut total: Option<Var<'t>> = None;
        for (j, &w) in self.weights.iter().enumerate() {
            let horizon = j + 1;
            let ce = self
                .logits(tape, rows, horizon, trainable)
                .cross_entropy_weighted(&targets[horizon..horizon + n], &vec![w / n as f64; n]);
            total = Some(match total {
                Some(acc) => acc + ce,
                None => ce,
            });
        }
        Ok(total.expect("at least one head"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::gradcheck::{check, max_rel_err};

    #[test]
    fn weights_match_closed_forms() {
        assert_eq!(ftp_weights(1).unwrap(), vec![1.0]);
        let w2 = ftp_weights(2).unwrap();
        assert!((w2[0] - 2.0 / 3.0).abs() < 1e-15 && (w2[1] - 1.0 / 3.0).abs() < 1e-15);
        let w5 = ftp_weights(5).unwrap();
        for (a, b) in w5.iter().zip([0.4380, 0.2190, 0.1460, 0.1095, 0.0876]) {
            assert!((a - b).abs() < 5e-4);
        }
        assert!(matches!(ftp_weights(0), Err(Error::Config(_))));
    }

    #[test]
    fn heads_copy_audio_rows() {
        let head = Tensor::from_fn(&[7, 3], |i| i as f64 * 0.1);
        let heads = init_heads(&head, &[4, 5, 6], 5, 3).unwrap();
        for k in 1..=5 {
            assert_eq!(heads.params.get(&head_name(k)).data(), &head.data()[12..]);
        }
        let tape = Tape::no_grad();
        let h = tape.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]));
        let full = h.matmul_t(tape.constant(head.clone())).value();
        assert_eq!(heads.logits(&tape, h, 2, false).value().data(), &full.data()[4..]);
        assert!(matches!(init_heads(&head, &[7], 2, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_heads_give_log_vocab_and_short_input_errors() {
        let heads = init_heads(&Tensor::zeros(&[256, 4]), &(0..256).collect::<Vec<_>>(), 5, 4).unwrap();
        let tape = Tape::no_grad();
        let h = tape.constant(Tensor::from_fn(&[9, 4], |i| (i as f64).sin()));
        let targets = [1, 200, 3, 4, 5, 6, 7, 8, 255];
        let l = heads.loss(&tape, h, &targets, false).unwrap();
        assert!((l.item() - 256f64.ln()).abs() < 1e-12);
        let short = tape.constant(Tensor::zeros(&[5, 4]));
        let err = heads.loss(&tape, short, &targets[..5], false).unwrap_err();
        assert!(err.to_string().contains("at least 6"), "{err}");
    }

    #[test]
    fn one_position_matches_hand_expansion() {
        let k = 3;
        let head = Tensor::from_fn(&[6, 2], |i| ((i * 7 % 5) as f64 - 2.0) * 0.4);
        let heads = init_heads(&head, &[0, 1, 2, 3, 4, 5], k, 2).unwrap();
        let h = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let targets = [0, 5, 2, 1];
        let tape = Tape::no_grad();
        let got = heads.loss(&tape, tape.constant(h.clone()), &targets, false).unwrap().item();
        let w = ftp_weights(k).unwrap();
        let mut want = 0.0;
        for j in 1..=k {
            let logits: Vec<f64> = (0..6).map(|v| head.row(v)[0] * h.row(0)[0] + head.row(v)[1] * h.row(0)[1]).collect();
            let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
            want += w[j - 1] * (lse - logits[targets[j]]);
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let heads0 = init_heads(&Tensor::from_fn(&[8, 4], |i| (i as f64 * 0.7).sin()), &(0..8).collect::<Vec<_>>(), 2, 4).unwrap();
        let targets = [3, 1, 7, 0, 2, 6];
        let inputs = [
            Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.31).cos()),
            heads0.params.get("ftp/head1").clone(),
            Tensor::from_fn(&[8, 4], |i| (i as f64 * 0.13).sin()),
        ];
        let r = check(&inputs, 1e-6, None, |_, v| {
            let n = 4;
            let w = ftp_weights(2).unwrap();
            let rows = v[0].narrow(0, 0, n);
            let a = rows.matmul_t(v[1]).cross_entropy_weighted(&targets[1..5], &[w[0] / 4.0; 4]);
            let b = rows.matmul_t(v[2]).cross_entropy_weighted(&targets[2..6], &[w[1] / 4.0; 4]);
            a + b
        });
        assert!(max_rel_err(&r) < 1e-4);
        // The composite above mirrors the loss; confirm the values agree.
        let mut heads = heads0.clone();
        heads.params.insert("ftp/head2", inputs[2].clone());
        let tape = Tape::no_grad();
        let got = heads.loss(&tape, tape.constant(inputs[0].clone()), &targets, false).unwrap().item();
        let tape2 = Tape::no_grad();
        let c: Vec<_> = inputs.iter().map(|t| tape2.constant(t.clone())).collect();
        let w = ftp_weights(2).unwrap();
        let rows = c[0].narrow(0, 0, 4);
        let want = rows.matmul_t(c[1]).cross_entropy_weighted(&targets[1..5], &[w[0] / 4.0; 4]).item()
            + rows.matmul_t(c[2]).cross_entropy_weighted(&targets[2..6], &[w[1] / 4.0; 4]).item();
        assert!((got - want).abs() < 1e-12);
    }
}
