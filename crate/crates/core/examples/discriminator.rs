//! Multi-period and multi-scale discriminators: hinge losses, feature
//! matching, the R1 penalty and the feature-matching pause gate.

use autodiff::{Tape, Tensor};
use llm_codec::adversarial::{gan_gate, gan_losses, r1_penalty, AdversarialConfig, DiscriminatorBank, GanGateState};

fn main() -> llm_codec::Result<()> {
    let bank = DiscriminatorBank::new(AdversarialConfig::default(), 1)?;
    let n = 4096;
    let real: Vec<f64> = (0..n).map(|i| 0.4 * (i as f64 * 0.05).sin()).collect();
    let fake: Vec<f64> = real.iter().map(|v| 0.8 * v).collect();

    let tape = Tape::new();
    let r = bank.discriminate(&tape, tape.constant(Tensor::new(&[n], real.clone())), false)?;
    let f = bank.discriminate(&tape, tape.constant(Tensor::new(&[n], fake)), false)?;
    println!("{} sub-discriminators", r.len());
    let l = gan_losses(&r, &f, 1.0)?;
    println!("d {:.4} g {:.4} fm {:.4}", l.d_loss.item(), l.g_loss.item(), l.fm_loss.item());

    let (pen, _) = r1_penalty(&bank, &real)?;
    println!("r1 {pen:.4e}");

    let mut gate = GanGateState::default();
    for (step, fm) in [(10, 0.5), (11, 0.995), (12, 0.2), (511, 0.2)] {
        gate = gan_gate(gate, fm, 1.0, step, 0.99, 500);
        println!("step {step}: fm share {fm} -> paused {}", gate.is_paused(step));
    }
    Ok(())
}
