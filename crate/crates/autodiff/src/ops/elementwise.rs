//! Elementwise arithmetic with suffix broadcasting, and unary maps.
//!
//! Broadcasting is restricted to the case where one operand's shape is a
//! trailing suffix of the other's (a scalar is a suffix of everything).

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// rhs repeats over the lhs shape
    Rhs,
    /// lhs repeats over the rhs shape
    Lhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.iter().product::<usize>() == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

fn plan(a: &[usize], b: &[usize]) -> (Vec<usize>, Bcast) {
    if a == b {
        (a.to_vec(), Bcast::Same)
    } else if is_suffix(b, a) {
        (a.to_vec(), Bcast::Rhs)
    } else if is_suffix(a, b) {
        (b.to_vec(), Bcast::Lhs)
    } else {
        panic!("cannot broadcast {a:?} with {b:?}");
    }
}

/// Sums `g` down to `n` elements by folding repeats (`out[i % n] += g[i]`).
pub(crate) fn fold_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if g.numel() == n {
        return g.clone().reshape(shape);
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape, out)
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, op: Bin) -> Var<'t> {
    let tape = a.tape;
    assert!(std::ptr::eq(tape, b.tape), "operands on different tapes");
    let av = a.value();
    let bv = b.value();
    let (shape, bc) = plan(av.shape(), bv.shape());
    let n: usize = shape.iter().product();
    let (na, nb) = (av.numel(), bv.numel());
    let ad = av.data();
    let bd = bv.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = ad[i % na];
        let y = bd[i % nb];
        out.push(match op {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        });
    }
    let a_shape = av.shape().to_vec();
    let b_shape = bv.shape().to_vec();
    let (av2, bv2) = (Rc::clone(&av), Rc::clone(&bv));
    let _ = bc;
    tape.push_op(
        Tensor::new(&shape, out),
        &[a, b],
        Box::new(move |g, needs| {
            let gd = g.data();
            let n = gd.len();
            let (na, nb) = (av2.numel(), bv2.numel());
            let ga = needs[0].then(|| {
                let full: Vec<f64> = match op {
                    Bin::Add | Bin::Sub => gd.to_vec(),
                    Bin::Mul => (0..n).map(|i| gd[i] * bv2.data()[i % nb]).collect(),
                    Bin::Div => (0..n).map(|i| gd[i] / bv2.data()[i % nb]).collect(),
                };
                fold_to(&Tensor::new(&[n], full), &a_shape)
            });
            let gb = needs[1].then(|| {
                let full: Vec<f64> = match op {
                    Bin::Add => gd.to_vec(),
                    Bin::Sub => gd.iter().map(|v| -v).collect(),
                    Bin::Mul => (0..n).map(|i| gd[i] * av2.data()[i % na]).collect(),
                    Bin::Div => (0..n)
                        .map(|i| {
                            let y = bv2.data()[i % nb];
                            -gd[i] * av2.data()[i % na] / (y * y)
                        })
                        .collect(),
                };
                fold_to(&Tensor::new(&[n], full), &b_shape)
            });
            vec![ga, gb]
        }),
    )
}

/// Unary op where the derivative is computed from input `x` and output `y`.
fn unary<'t>(
    a: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let av = a.value();
    let out = av.map(f);
    let out_rc = Rc::new(out.clone());
    a.tape.push_op(
        out,
        &[a],
        Box::new(move |g, _| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(av.data().iter().zip(out_rc.data()))
                .map(|(gv, (&x, &y))| gv * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        }),
    )
}

// Named methods back the operator impls and read better in chains.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, Bin::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, Bin::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, Bin::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, Bin::Div)
    }

    /// Multiplies by a constant tensor (no gradient to the constant).
    pub fn mul_const(self, c: &Tensor) -> Var<'t> {
        let k = self.tape.constant(c.clone());
        self.mul(k)
    }

    pub fn add_const(self, c: &Tensor) -> Var<'t> {
        let k = self.tape.constant(c.clone());
        self.add(k)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        unary(self, move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    /// Square root whose derivative is taken as zero at exactly zero.
    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Absolute value with subgradient zero at zero.
    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        unary(
            self,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}
