//! Fused neural-network primitives: softmax family, cross-entropy and
//! normalizations over the last axis.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::Tensor;

fn rows_of(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().expect("op needs at least one axis");
    (t.numel() / n.max(1), n)
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Row-wise log-softmax of raw values.
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let (rows, n) = rows_of(t);
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        log_softmax_row(&t.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
    }
    Tensor::new(t.shape(), out)
}

/// Row-wise softmax of raw values.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    log_softmax_rows(t).map(f64::exp)
}

impl<'t> Var<'t> {
    pub fn softmax_last(self) -> Var<'t> {
        let y = Rc::new(softmax_rows(&self.value()));
        let y2 = Rc::clone(&y);
        self.tape.push_op(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let (rows, n) = rows_of(&y2);
                let mut d = vec![0.0; y2.numel()];
                for r in 0..rows {
                    let ys = &y2.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(Tensor::new(y2.shape(), d))]
            }),
        )
    }

    pub fn log_softmax_last(self) -> Var<'t> {
        let y = log_softmax_rows(&self.value());
        let p = Rc::new(y.map(f64::exp));
        self.tape.push_op(
            y,
            &[self],
            Box::new(move |g, _| {
                let (rows, n) = rows_of(&p);
                let mut d = vec![0.0; p.numel()];
                for r in 0..rows {
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let s: f64 = gs.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gs[j] - p.data()[r * n + j] * s;
                    }
                }
                vec![Some(Tensor::new(p.shape(), d))]
            }),
        )
    }

    /// Weighted sum of per-row cross-entropies of `self` (rows x classes)
    /// against integer targets: `sum_i w_i * (logsumexp(x_i) - x_i[t_i])`.
    /// Rows with weight zero contribute nothing. Targets must be in range.
    pub fn cross_entropy_weighted(self, targets: &[usize], weights: &[f64]) -> Var<'t> {
        let v = self.value();
        let (rows, n) = rows_of(&v);
        assert_eq!(targets.len(), rows, "one target per row");
        assert_eq!(weights.len(), rows, "one weight per row");
        let lp = log_softmax_rows(&v);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            assert!(t < n, "target {t} out of range for {n} classes");
            if w != 0.0 {
                loss -= w * lp.data()[r * n + t];
            }
        }
        let p = lp.map(f64::exp);
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.tape.push_op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _| {
                let gs = g.item();
                let mut d = p.data().to_vec();
                for r in 0..rows {
                    let w = weights[r] * gs;
                    let row = &mut d[r * n..(r + 1) * n];
                    row.iter_mut().for_each(|x| *x *= w);
                    row[targets[r]] -= w;
                }
                vec![Some(Tensor::new(p.shape(), d))]
            }),
        )
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'t> {
        let rows = targets.len();
        let w = vec![1.0 / rows.max(1) as f64; rows];
        self.cross_entropy_weighted(targets, &w)
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm_last(self, eps: f64) -> Var<'t> {
        self.normalize_last(eps, true)
    }

    /// `x / sqrt(sum(x^2) + eps)` over the last axis.
    pub fn l2_normalize_last(self, eps: f64) -> Var<'t> {
        self.normalize_last(eps, false)
    }

    fn normalize_last(self, eps: f64, mean: bool) -> Var<'t> {
        let v = self.value();
        let (rows, n) = rows_of(&v);
        let div = if mean { n as f64 } else { 1.0 };
        let mut y = vec![0.0; v.numel()];
        let mut scales = vec![0.0; rows];
        for r in 0..rows {
            let xs = &v.data()[r * n..(r + 1) * n];
            let s = (xs.iter().map(|a| a * a).sum::<f64>() / div + eps).sqrt();
            scales[r] = s;
            for j in 0..n {
                y[r * n + j] = xs[j] / s;
            }
        }
        let y = Tensor::new(v.shape(), y);
        let y2 = y.clone();
        self.tape.push_op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; y2.numel()];
                for r in 0..rows {
                    let ys = &y2.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot = ys.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / div;
                    for j in 0..n {
                        d[r * n + j] = (gs[j] - ys[j] * dot) / scales[r];
                    }
                }
                vec![Some(Tensor::new(y2.shape(), d))]
            }),
        )
    }

    /// Adds a per-channel bias `[C]` to a `[B, C, L]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 3, "add_channel_bias needs [B, C, L]");
        let (bs, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(b.numel(), c, "bias must have one value per channel");
        let mut out = x.data().to_vec();
        for bi in 0..bs {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                out[off..off + l].iter_mut().for_each(|v| *v += b.data()[ci]);
            }
        }
        let b_shape = b.shape().to_vec();
        self.tape.push_op(
            Tensor::new(x.shape(), out),
            &[self, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for bi in 0..bs {
                        for (ci, dv) in d.iter_mut().enumerate() {
                            let off = (bi * c + ci) * l;
                            *dv += g.data()[off..off + l].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&b_shape, d)
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        )
    }
}
