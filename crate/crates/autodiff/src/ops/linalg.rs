//! Matrix products and transposition.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

impl<'t> Var<'t> {
    /// `self (m x k) * other (k x n)`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs matrices");
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(1);
        assert_eq!(k, b.dim(0), "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let out = a.matmul(&b);
        let (a2, b2) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b2.data(), true, &mut d, false);
                    Tensor::new(&[m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a2.data(), true, g.data(), false, &mut d, false);
                    Tensor::new(&[k, n], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self (m x k) * other^T` where `other` is `n x k`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul_t needs matrices");
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(0);
        assert_eq!(k, b.dim(1), "matmul_t inner dims {:?} x {:?}^T", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
        let (a2, b2) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push_op(
            Tensor::new(&[m, n], out),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b2.data(), false, &mut d, false);
                    Tensor::new(&[m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, a2.data(), false, &mut d, false);
                    Tensor::new(&[n, k], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "t() needs a matrix");
        self.tape.push_op(
            v.t(),
            &[self],
            Box::new(|g, _| vec![Some(g.t())]),
        )
    }
}
