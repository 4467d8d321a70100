//! Alignment of pooled audio states with a text target: layer selection,
//! cosine loss, and the memory-bank contrastive loss.

use autodiff::{Tape, Tensor};
use llm_codec::align::{contrastive_loss, cosine_align, select_layers, MemoryBank};

fn unit(i: usize, h: usize) -> Vec<f64> {
    (0..h).map(|j| ((i * 31 + j * 7) as f64).sin()).collect()
}

fn main() -> llm_codec::Result<()> {
    for layers in [4, 8, 32] {
        println!("{layers} layers -> aligned {:?}", select_layers(layers)?);
    }

    let h = 16;
    let mut bank = MemoryBank::new(8);
    for i in 0..12 {
        bank.push(&unit(i, h))?;
    }
    println!("bank holds {} of capacity {}", bank.len(), bank.capacity());

    let text = unit(100, h);
    for (label, audio) in [("matching", text.clone()), ("unrelated", unit(200, h))] {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[h], audio));
        let cos = cosine_align(&tape, &[a], &[Tensor::new(&[h], text.clone())])?;
        let ctr = contrastive_loss(&tape, a, &text, &bank, 5.0, 0.1)?;
        println!("{label:<9} cosine {:.4} contrastive {:.4}", cos.item(), ctr.item());
    }
    Ok(())
}
