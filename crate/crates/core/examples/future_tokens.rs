//! Future-token heads: inverse-distance horizon weights, heads copied from
//! the output head's audio rows, and the weighted multi-step loss.

use autodiff::Tape;
use llm_codec::backbone::{build_backbone, BackboneConfig};
use llm_codec::ftp::{ftp_weights, init_heads};

fn main() -> llm_codec::Result<()> {
    for k in 1..=5 {
        println!("K={k}: {:.3?}", ftp_weights(k)?);
    }

    let cfg = BackboneConfig {
        layers: 2,
        hidden: 32,
        ..BackboneConfig::default()
    };
    let bb = build_backbone(&cfg, 0)?;
    let heads = init_heads(bb.lm_head(), &bb.audio_ids(), 5, cfg.hidden)?;

    // A periodic token stream the backbone has never seen.
    let tokens: Vec<usize> = (0..24).map(|t| (t / 2) % 6).collect();
    let tape = Tape::new();
    let x = bb.embed_audio(&tape, &tokens, true)?;
    let out = bb.forward_hidden(&tape, x, false)?;
    let loss = heads.loss(&tape, out.final_normed, &tokens, true)?;
    let grads = loss.backward();
    println!("loss {:.4} (uniform would be {:.4})", loss.item(), (cfg.audio_vocab as f64).ln());
    for (name, g) in grads.params() {
        if name.starts_with("ftp/") {
            println!("  {name}: |grad| {:.3e}", g.sq_norm().sqrt());
        }
    }
    Ok(())
}
