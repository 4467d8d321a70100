//! The four reconstruction terms and their gradient with respect to the
//! estimate, for a clean tone against a noisy copy.

use autodiff::{Tape, Tensor};
use llm_codec::recon::recon_loss;
use llm_codec::spectral::{Spectral, SpectralConfig};

fn main() -> llm_codec::Result<()> {
    let spec = Spectral::new(SpectralConfig::default(), 16_000)?;
    let n = 8192;
    let clean: Vec<f64> = (0..n).map(|i| 0.5 * (i as f64 * 440.0 * std::f64::consts::TAU / 16_000.0).sin()).collect();

    for noise in [0.0, 0.01, 0.1] {
        let noisy: Vec<f64> = clean
            .iter()
            .enumerate()
            .map(|(i, v)| v + noise * ((i * 7919 % 1000) as f64 / 500.0 - 1.0))
            .collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n], clean.clone()));
        let x_hat = tape.leaf(Tensor::new(&[n], noisy));
        let r = recon_loss(&spec, x, x_hat)?;
        let total = r.mel.scale(1.5) + r.ms_mel.scale(0.5) + r.mr_stft.scale(0.5) + r.cstft.scale(0.8);
        let g = total.backward().get_or_zeros(x_hat);
        println!(
            "noise {noise:<5} mel {:.4} ms_mel {:.4} mr_stft {:.4} cstft {:.4} |grad| {:.3e}",
            r.mel.item(),
            r.ms_mel.item(),
            r.mr_stft.item(),
            r.cstft.item(),
            g.sq_norm().sqrt()
        );
    }
    Ok(())
}
