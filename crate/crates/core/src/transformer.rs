//! Pre-norm causal transformer blocks with rotary position encoding,
//! shared by the frozen backbone and the evaluation token LMs.

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_normal, ParamStore};

const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    pub max_seq: usize,
}

impl TransformerShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.mlp_mult == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) || !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden {} must split into {} heads of even width",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Adds block parameters `{prefix}/l{i}/...` and `{prefix}/final_norm`.
pub fn init_blocks(p: &mut ParamStore, prefix: &str, shape: &TransformerShape, rng: &mut impl Rng) {
    let h = shape.hidden;
    let f = h * shape.mlp_mult;
    let std = 1.0 / (h as f64).sqrt();
    let out_std = std / (2.0 * shape.layers as f64).sqrt();
    for i in 0..shape.layers {
        let l = format!("{prefix}/l{i}");
        p.insert(format!("{l}/n1"), Tensor::ones(&[h]));
        p.insert(format!("{l}/wq"), init_normal(rng, &[h, h], std));
        p.insert(format!("{l}/wk"), init_normal(rng, &[h, h], std));
        p.insert(format!("{l}/wv"), init_normal(rng, &[h, h], std));
        p.insert(format!("{l}/wo"), init_normal(rng, &[h, h], out_std));
        p.insert(format!("{l}/n2"), Tensor::ones(&[h]));
        p.insert(format!("{l}/w1"), init_normal(rng, &[h, f], std));
        p.insert(format!("{l}/w2"), init_normal(rng, &[f, h], 1.0 / (f as f64).sqrt() / (2.0 * shape.layers as f64).sqrt()));
    }
    p.insert(format!("{prefix}/final_norm"), Tensor::ones(&[h]));
}

/// Position tables `(cos, sin)` of shape `[T, d]` and the constant matrix
/// that rotates each half of a head vector into the other.
fn rope_tables(t: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    let half = d / 2;
    let mut cos = Tensor::zeros(&[t, d]);
    let mut sin = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..half {
            let theta = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / d as f64);
            for j in [i, i + half] {
                cos.data_mut()[pos * d + j] = theta.cos();
                sin.data_mut()[pos * d + j] = theta.sin();
            }
        }
    }
    let mut rot = Tensor::zeros(&[d, d]);
    for i in 0..half {
        rot.data_mut()[(i + half) * d + i] = -1.0;
        rot.data_mut()[i * d + i + half] = 1.0;
    }
    (cos, sin, rot)
}

fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { MASKED } else { 0.0 })
}

/// Hidden states after every block and the final-normed last state.
pub struct BlockOutputs<'t> {
    pub layers: Vec<Var<'t>>,
    pub final_normed: Var<'t>,
}

/// Runs the blocks under `prefix` on input embeddings `x` (`[T, H]`).
pub fn run_blocks<'t>(
    p: &ParamStore,
    prefix: &str,
    shape: &TransformerShape,
    tape: &'t Tape,
    x: Var<'t>,
    trainable: bool,
) -> Result<BlockOutputs<'t>> {
    let sh = x.shape();
    if sh.len() != 2 || sh[1] != shape.hidden {
        return Err(Error::Shape(format!("expected [T, {}] embeddings, got {sh:?}", shape.hidden)));
    }
    let t = sh[0];
    if t == 0 || t > shape.max_seq {
        return Err(Error::Shape(format!("sequence of {t} positions exceeds max_seq {}", shape.max_seq)));
    }
    let d = shape.head_dim();
    let (cos, sin, rot) = rope_tables(t, d);
    let rot = tape.constant(rot);
    let mask = causal_mask(t);
    let scale = 1.0 / (d as f64).sqrt();
    let bind = |name: &str| p.bind(tape, &format!("{prefix}/{name}"), trainable);
    let rope = |v: Var<'t>| v.mul_const(&cos) + v.matmul(rot).mul_const(&sin);

    let mut h = x;
    let mut layers = Vec::with_capacity(shape.layers);
    for i in 0..shape.layers {
        let l = format!("l{i}");
        let xn = h.rms_norm_last(NORM_EPS) * bind(&format!("{l}/n1"));
        let q = xn.matmul(bind(&format!("{l}/wq")));
        let k = xn.matmul(bind(&format!("{l}/wk")));
        let v = xn.matmul(bind(&format!("{l}/wv")));
        let heads: Vec<Var<'t>> = (0..shape.heads)
            .map(|hd| {
                let qh = rope(q.narrow(1, hd * d, d));
                let kh = rope(k.narrow(1, hd * d, d));
                let vh = v.narrow(1, hd * d, d);
                qh.matmul_t(kh).scale(scale).add_const(&mask).softmax_last().matmul(vh)
            })
            .collect();
        let att = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1) };
        h = h + att.matmul(bind(&format!("{l}/wo")));
        let hn = h.rms_norm_last(NORM_EPS) * bind(&format!("{l}/n2"));
        h = h + hn.matmul(bind(&format!("{l}/w1"))).silu().matmul(bind(&format!("{l}/w2")));
        layers.push(h);
    }
    let final_normed = h.rms_norm_last(NORM_EPS) * bind("final_norm");
    Ok(BlockOutputs { layers, final_normed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> TransformerShape {
        TransformerShape {
            layers: 2,
            hidden: 8,
            heads: 2,
            mlp_mult: 2,
            max_seq: 16,
        }
    }

    #[test]
    fn perturbing_position_t_leaves_earlier_positions_untouched() {
        let mut p = ParamStore::new();
        init_blocks(&mut p, "m", &shape(), &mut crate::rng::stream(0, &[]));
        let x = Tensor::from_fn(&[6, 8], |i| (i as f64 * 0.31).sin());
        let mut y = x.clone();
        for j in 0..8 {
            y.data_mut()[4 * 8 + j] += 0.7;
        }
        let tape = Tape::no_grad();
        let a = run_blocks(&p, "m", &shape(), &tape, tape.constant(x), false).unwrap();
        let b = run_blocks(&p, "m", &shape(), &tape, tape.constant(y), false).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let (va, vb) = (la.value(), lb.value());
            assert_eq!(&va.data()[..4 * 8], &vb.data()[..4 * 8]);
            assert_ne!(&va.data()[4 * 8..5 * 8], &vb.data()[4 * 8..5 * 8]);
        }
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let mut p = ParamStore::new();
        init_blocks(&mut p, "m", &shape(), &mut crate::rng::stream(0, &[]));
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[17, 8]));
        assert!(matches!(run_blocks(&p, "m", &shape(), &tape, x, false), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_matrix_rotates_halves() {
        let (_, _, r) = rope_tables(1, 4);
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.matmul(&r).data(), &[-3.0, -4.0, 1.0, 2.0]);
    }
}
