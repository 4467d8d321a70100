//! Reductions.

use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape.push_op(
            Tensor::scalar(v.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let n = *shape.last().expect("sum_last on a scalar");
        let rows = v.numel() / n.max(1);
        let out: Vec<f64> = (0..rows)
            .map(|r| v.data()[r * n..(r + 1) * n].iter().sum())
            .collect();
        let out_shape = &shape[..shape.len() - 1];
        self.tape.push_op(
            Tensor::new(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(rows * n);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, n));
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    pub fn mean_last(self) -> Var<'t> {
        let n = *self.value().shape().last().expect("mean_last on a scalar");
        self.sum_last().scale(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sum_last_shapes_and_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = x.sum_last();
        assert_eq!(s.value().data(), &[3.0, 12.0]);
        let w = tape.constant(Tensor::new(&[2], vec![1.0, -2.0]));
        let grads = (s * w).sum().backward();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
    }
}
