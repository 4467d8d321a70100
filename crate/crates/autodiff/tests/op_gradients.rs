use autodiff::gradcheck::{check, max_rel_err};
use autodiff::{Conv1dSpec, StftPlan, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], seed: f64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin() * 0.9 + 0.05)
}

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

#[test]
fn arithmetic_with_broadcast() {
    let r = check(&[t(&[3, 4], 0.7), t(&[4], 1.3), t(&[], 0.4)], EPS, None, |_, v| {
        let a = (v[0] * v[1] + v[2]) / (v[1].square() + 1.0);
        (a - v[0].exp().scale(0.1)).sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn unary_maps() {
    let x = t(&[10], 2.1);
    let r = check(&[x], EPS, None, |_, v| {
        let a = v[0].tanh() + v[0].sigmoid() + v[0].silu() + v[0].leaky_relu(0.2);
        let b = v[0].square().add_scalar(0.5).sqrt().ln() + v[0].abs();
        (a * b).sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn matmul_variants_and_transpose() {
    let r = check(&[t(&[3, 5], 0.3), t(&[5, 2], 0.9), t(&[4, 5], 1.7)], EPS, None, |_, v| {
        let a = v[0].matmul(v[1]);
        let b = v[0].matmul_t(v[2]).t();
        a.square().sum() + b.tanh().sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn softmax_family_and_cross_entropy() {
    let r = check(&[t(&[4, 6], 1.1)], EPS, None, |tape, v| {
        let w = tape.constant(t(&[4, 6], 0.2));
        let a = (v[0].softmax_last() * w).sum();
        let b = (v[0].log_softmax_last() * w).sum();
        let c = v[0].cross_entropy_weighted(&[0, 5, 2, 2], &[0.5, 1.0, 0.0, 2.0]);
        a + b + c
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn normalizations() {
    let r = check(&[t(&[3, 5], 0.6)], EPS, None, |tape, v| {
        let w = tape.constant(t(&[3, 5], 1.9));
        (v[0].rms_norm_last(1e-6) * w).sum() + (v[0].l2_normalize_last(1e-12) * w).sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn shape_ops() {
    let r = check(&[t(&[4, 3], 0.8), t(&[2, 3], 0.5)], EPS, None, |tape, v| {
        let c = autodiff::Var::concat(&[v[0], v[1]], 0);
        let g = c.index_select0(&[5, 0, 0, 3]);
        let n = c.narrow(1, 1, 2).reshape(&[12]);
        let w = tape.constant(t(&[12], 0.33));
        g.square().sum() + (n * w).sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn conv_and_transposed_conv() {
    let r = check(
        &[t(&[2, 2, 13], 0.4), t(&[3, 2, 4], 1.2), t(&[3], 0.9), t(&[3, 2, 6], 0.7)],
        EPS,
        None,
        |tape, v| {
            let y = v[0].conv1d(v[1], Conv1dSpec::new(2, 1, 2)).add_channel_bias(v[2]);
            let z = y.tanh().conv_transpose1d(v[3], Conv1dSpec::new(3, 2, 1));
            let w = tape.constant(t(&z.shape(), 0.21));
            (z * w).sum() + y.square().mean()
        },
    );
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn pooling_and_reflect_pad() {
    let r = check(&[t(&[2, 20], 0.45)], EPS, None, |tape, v| {
        let p = v[0].reflect_pad_last(3, 4).avg_pool_last(4, 3);
        let w = tape.constant(t(&p.shape(), 1.4));
        (p * w).sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn stft_magnitude_loss() {
    let plan = StftPlan::hann_normalized(16, 4);
    let r = check(&[t(&[48], 0.77)], EPS, None, |_, v| {
        let s = v[0].reflect_pad_last(8, 8).stft(&plan);
        let re = s.narrow(0, 0, 1);
        let im = s.narrow(0, 1, 1);
        (re.square() + im.square()).add_scalar(1e-9).sqrt().sum()
    });
    assert!(max_rel_err(&r) < TOL, "{r:?}");
}

#[test]
fn straight_through_composition_value_and_gradient() {
    // y = hard + (soft - sg(soft)): value is exactly `hard`, gradient is soft's.
    let x = t(&[2, 4], 1.5);
    let w = t(&[2, 4], 0.3);
    let tape = autodiff::Tape::new();
    let xv = tape.leaf(x.clone());
    let soft = xv.softmax_last();
    let hard = Tensor::new(&[2, 4], vec![0., 1., 0., 0., 1., 0., 0., 0.]);
    let st = tape.constant(hard.clone()) + (soft - soft.detach());
    assert_eq!(st.value().data(), hard.data());
    let g_st = (st.mul_const(&w)).sum().backward().get_or_zeros(xv);
    let tape2 = autodiff::Tape::new();
    let xv2 = tape2.leaf(x);
    let g_soft = xv2.softmax_last().mul_const(&w).sum().backward().get_or_zeros(xv2);
    assert_eq!(g_st, g_soft);
}

#[test]
fn gradients_by_param_name() {
    let tape = autodiff::Tape::new();
    let w = tape.param("w", &Tensor::new(&[2], vec![1.0, 2.0]));
    let w_again = tape.param("w", &Tensor::new(&[2], vec![9.0, 9.0]));
    assert_eq!(w.id(), w_again.id());
    let loss = (w * w_again).sum();
    let grads = loss.backward();
    let named: Vec<_> = grads.params().collect();
    assert_eq!(named.len(), 1);
    assert_eq!(named[0].0, "w");
    assert_eq!(named[0].1.data(), &[2.0, 4.0]);
}

#[test]
fn no_grad_tape_records_no_gradients() {
    let tape = autodiff::Tape::no_grad();
    let w = tape.param("w", &Tensor::ones(&[3]));
    assert!(!w.requires_grad());
    let y = (w * w).sum();
    assert!(!y.requires_grad());
}

proptest! {
    #[test]
    fn suffix_broadcast_add_matches_manual(rows in 1usize..5, cols in 1usize..5, seed in 0.1f64..3.0) {
        let tape = autodiff::Tape::no_grad();
        let a = t(&[rows, cols], seed);
        let b = t(&[cols], seed * 1.7);
        let s = tape.constant(a.clone()) + tape.constant(b.clone());
        let v = s.value();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(v.at2(r, c), a.at2(r, c) + b.data()[c]);
            }
        }
    }
}
