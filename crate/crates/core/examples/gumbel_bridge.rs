//! Straight-through Gumbel sampling: hard one-hot forward values whose
//! selection frequencies follow softmax(logits / tau).

use autodiff::{Tape, Tensor};
use llm_codec::bridge::{gumbel_noise, straight_through, temperature, BridgeConfig};
use llm_codec::rng::stream;

fn main() {
    let cfg = BridgeConfig::default();
    for step in [0, 5_000, 10_000, 20_000, 25_000] {
        println!("tau({step}) = {:.3}", temperature(step, &cfg));
    }

    let logits = [1.5, 0.5, 0.0, -1.0];
    let v = logits.len();
    let rows = 20_000;
    let mut rng = stream(0, &[]);
    for tau in [1.0, 0.3] {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::from_fn(&[rows, v], |i| logits[i % v]));
        let noise = gumbel_noise(&mut rng, rows * v);
        let (y, ids) = straight_through(l, Some(&noise), tau);
        let mut freq = vec![0.0; v];
        for k in ids {
            freq[k] += 1.0 / rows as f64;
        }
        let z: f64 = logits.iter().map(|x| (x / tau).exp()).sum();
        let want: Vec<f64> = logits.iter().map(|x| (x / tau).exp() / z).collect();
        println!("tau {tau}: sampled {freq:.3?} expected {want:.3?}");

        // Gradient through the hard sample equals the softmax Jacobian path.
        let g = y.mul_const(&Tensor::from_fn(&[rows, v], |i| (i % v) as f64)).sum().backward();
        println!("  mean d/dlogit {:.4?}", &g.get_or_zeros(l).data()[..v]);
    }
}
