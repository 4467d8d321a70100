//! Reshaping, slicing, concatenation and row gathers.

use crate::tape::Var;
use crate::tensor::Tensor;

/// Splits a shape around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(start + len <= dim, "narrow {start}+{len} exceeds {dim} on axis {axis}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.push_op(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let dims: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(i == axis || a == b, "concat extent mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push_op(
            Tensor::new(&out_shape, out),
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Vec<f64>> = dims
                    .iter()
                    .map(|&d| Vec::with_capacity(outer * d * inner))
                    .collect();
                let gd = g.data();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &d) in grads.iter_mut().zip(&dims) {
                        gr.extend_from_slice(&gd[pos..pos + d * inner]);
                        pos += d * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::new(s, d)))
                    .collect()
            }),
        )
    }

    /// Gathers slices along axis 0: `out[i] = self[indices[i]]`.
    pub fn index_select0(self, indices: &[usize]) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < rows, "index {i} out of range for {rows} rows");
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        self.tape.push_op(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rows * inner];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * inner..(r + 1) * inner];
                    for (a, b) in d[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn narrow_middle_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let y = x.narrow(1, 1, 2);
        assert_eq!(y.shape(), vec![2, 2, 2]);
        assert_eq!(y.value().data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let g = y.sum().backward();
        assert_eq!(
            g.get(x).unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn concat_then_split_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = crate::Var::concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let g = (c * w).sum().backward();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn index_select_accumulates_repeats() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = e.index_select0(&[2, 0, 2]);
        assert_eq!(y.value().data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let g = y.sum().backward();
        assert_eq!(g.get(e).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
