//! 1-D convolution, transposed convolution, pooling and padding over
//! `[batch, channels, length]` tensors.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

/// Geometry of a strided 1-D convolution with asymmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dSpec {
    pub fn new(stride: usize, pad_left: usize, pad_right: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        Self {
            stride,
            pad_left,
            pad_right,
        }
    }

    /// Same-length convolution for odd kernels at stride one.
    pub fn same(kernel: usize) -> Self {
        Self::new(1, (kernel - 1) / 2, kernel / 2)
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        assert!(padded >= kernel, "input of length {len} shorter than kernel {kernel}");
        (padded - kernel) / self.stride + 1
    }
}

fn im2col(x: &[f64], cin: usize, len: usize, k: usize, spec: Conv1dSpec, lout: usize, col: &mut [f64]) {
    for ci in 0..cin {
        let xs = &x[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let row = &mut col[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (o, c) in row.iter_mut().enumerate() {
                let pos = (o * spec.stride + kk) as isize - spec.pad_left as isize;
                *c = if pos >= 0 && (pos as usize) < len {
                    xs[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(col: &[f64], cin: usize, len: usize, k: usize, spec: Conv1dSpec, lout: usize, x: &mut [f64]) {
    for ci in 0..cin {
        for kk in 0..k {
            let row = &col[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (o, c) in row.iter().enumerate() {
                let pos = (o * spec.stride + kk) as isize - spec.pad_left as isize;
                if pos >= 0 && (pos as usize) < len {
                    x[ci * len + pos as usize] += c;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[B, Cin, L]` with weights `[Cout, Cin, K]`.
    pub fn conv1d(self, weight: Var<'t>, spec: Conv1dSpec) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 3, "conv1d input must be [B, C, L], got {:?}", x.shape());
        assert_eq!(w.ndim(), 3, "conv1d weight must be [Cout, Cin, K]");
        let (b, cin, len) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, cin_w, k) = (w.dim(0), w.dim(1), w.dim(2));
        assert_eq!(cin, cin_w, "conv1d channel mismatch");
        let lout = spec.out_len(len, k);
        let mut out = vec![0.0; b * cout * lout];
        let mut col = vec![0.0; cin * k * lout];
        for bi in 0..b {
            im2col(&x.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, spec, lout, &mut col);
            gemm(
                cout,
                cin * k,
                lout,
                w.data(),
                false,
                &col,
                false,
                &mut out[bi * cout * lout..(bi + 1) * cout * lout],
                false,
            );
        }
        let (x2, w2) = (Rc::clone(&x), Rc::clone(&w));
        self.tape.push_op(
            Tensor::new(&[b, cout, lout], out),
            &[self, weight],
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; b * cin * len]);
                let mut dw = needs[1].then(|| vec![0.0; cout * cin * k]);
                let mut col = vec![0.0; cin * k * lout];
                let mut dcol = vec![0.0; cin * k * lout];
                for bi in 0..b {
                    let gb = &g.data()[bi * cout * lout..(bi + 1) * cout * lout];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&x2.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, spec, lout, &mut col);
                        gemm(cout, lout, cin * k, gb, false, &col, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(cin * k, cout, lout, w2.data(), true, gb, false, &mut dcol, false);
                        col2im(&dcol, cin, len, k, spec, lout, &mut dx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[b, cin, len], d)),
                    dw.map(|d| Tensor::new(&[cout, cin, k], d)),
                ]
            }),
        )
    }

    /// Transposed convolution of `[B, Cin, L]` with weights `[Cin, Cout, K]`.
    /// The full output has `(L - 1) * stride + K` samples; `spec.pad_left`
    /// and `spec.pad_right` are cropped from its ends.
    pub fn conv_transpose1d(self, weight: Var<'t>, spec: Conv1dSpec) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 3, "conv_transpose1d input must be [B, C, L]");
        assert_eq!(w.ndim(), 3, "conv_transpose1d weight must be [Cin, Cout, K]");
        let (b, cin, len) = (x.dim(0), x.dim(1), x.dim(2));
        let (cin_w, cout, k) = (w.dim(0), w.dim(1), w.dim(2));
        assert_eq!(cin, cin_w, "conv_transpose1d channel mismatch");
        let full = (len - 1) * spec.stride + k;
        assert!(full > spec.pad_left + spec.pad_right, "crop larger than output");
        let lout = full - spec.pad_left - spec.pad_right;
        // Viewed from the output side this is the adjoint of a conv1d over
        // `lout` samples producing `len` frames.
        let adj = Conv1dSpec::new(spec.stride, spec.pad_left, 0);
        let mut out = vec![0.0; b * cout * lout];
        let mut cols = vec![0.0; cout * k * len];
        for bi in 0..b {
            gemm(
                cout * k,
                cin,
                len,
                w.data(),
                true,
                &x.data()[bi * cin * len..(bi + 1) * cin * len],
                false,
                &mut cols,
                false,
            );
            col2im(&cols, cout, lout, k, adj, len, &mut out[bi * cout * lout..(bi + 1) * cout * lout]);
        }
        let (x2, w2) = (Rc::clone(&x), Rc::clone(&w));
        self.tape.push_op(
            Tensor::new(&[b, cout, lout], out),
            &[self, weight],
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; b * cin * len]);
                let mut dw = needs[1].then(|| vec![0.0; cin * cout * k]);
                let mut dcols = vec![0.0; cout * k * len];
                for bi in 0..b {
                    im2col(
                        &g.data()[bi * cout * lout..(bi + 1) * cout * lout],
                        cout,
                        lout,
                        k,
                        adj,
                        len,
                        &mut dcols,
                    );
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            cin,
                            cout * k,
                            len,
                            w2.data(),
                            false,
                            &dcols,
                            false,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                            false,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            cin,
                            len,
                            cout * k,
                            &x2.data()[bi * cin * len..(bi + 1) * cin * len],
                            false,
                            &dcols,
                            true,
                            dw,
                            true,
                        );
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[b, cin, len], d)),
                    dw.map(|d| Tensor::new(&[cin, cout, k], d)),
                ]
            }),
        )
    }

    /// Average pooling over the last axis with window `k` and stride `s`,
    /// no padding. Works on any rank; the last axis is pooled.
    pub fn avg_pool_last(self, k: usize, s: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape.last().expect("avg_pool on a scalar");
        assert!(len >= k && k >= 1 && s >= 1, "bad pooling geometry");
        let rows = x.numel() / len;
        let lout = (len - k) / s + 1;
        let inv = 1.0 / k as f64;
        let mut out = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            let xs = &x.data()[r * len..(r + 1) * len];
            for o in 0..lout {
                out.push(xs[o * s..o * s + k].iter().sum::<f64>() * inv);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = lout;
        self.tape.push_op(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * len];
                for r in 0..rows {
                    for o in 0..lout {
                        let gv = g.data()[r * lout + o] * inv;
                        d[r * len + o * s..r * len + o * s + k]
                            .iter_mut()
                            .for_each(|v| *v += gv);
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    /// Reflect padding on the last axis (edge sample not repeated).
    pub fn reflect_pad_last(self, left: usize, right: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let len = *shape.last().expect("reflect_pad on a scalar");
        assert!(left < len && right < len, "reflect pad {left}/{right} needs length > pad, got {len}");
        let rows = x.numel() / len;
        let lout = len + left + right;
        let src: Vec<usize> = (0..lout)
            .map(|j| {
                let p = j as isize - left as isize;
                if p < 0 {
                    (-p) as usize
                } else if p as usize >= len {
                    2 * (len - 1) - p as usize
                } else {
                    p as usize
                }
            })
            .collect();
        let mut out = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            out.extend(src.iter().map(|&i| x.data()[r * len + i]));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = lout;
        self.tape.push_op(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * len];
                for r in 0..rows {
                    for (j, &i) in src.iter().enumerate() {
                        d[r * len + i] += g.data()[r * lout + j];
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }
}
