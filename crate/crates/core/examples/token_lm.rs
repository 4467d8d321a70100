//! Trains a small causal token LM on codec tokens and reports held-out
//! perplexity, then scores coherent / incoherent pairs. The codec is
//! untrained; its codebook is reseeded from encoder latents so that the
//! tokens are spread over the vocabulary.

use llm_codec::audio::{generate_corpus, make_incoherent_pair, CorpusSpec, NuisanceKind};
use llm_codec::backbone::{train_token_lm, SequenceScorer, TokenLmConfig};
use llm_codec::codec::{Codec, CodecConfig};
use llm_codec::eval::{coherence_accuracy, perplexity};
use llm_codec::rng::stream;

fn main() -> llm_codec::Result<()> {
    let spec = CorpusSpec {
        n_utterances: 60,
        ..CorpusSpec::default()
    };
    let utts = generate_corpus(&spec, 1)?;
    let mut codec = Codec::new(CodecConfig::default(), 0)?;
    let mut pool = Vec::new();
    for u in &utts[..50] {
        pool.extend_from_slice(codec.latents(&u.audio)?.frames.data());
    }
    let c = codec.codebook.dim();
    let pool = autodiff::Tensor::new(&[pool.len() / c, c], pool);
    let reseeded = codec.codebook.reseed_dead(&pool, f64::INFINITY, &mut stream(0, &[1]));
    println!("codebook reseeded: {reseeded} entries from {} latent frames", pool.dim(0));
    let tokens = utts.iter().map(|u| codec.tokenize(&u.audio)).collect::<llm_codec::Result<Vec<_>>>()?;
    let (train, held) = tokens.split_at(50);

    let cfg = TokenLmConfig::default();
    let (lm, curve) = train_token_lm(train, &cfg, 3, 9)?;
    println!("loss curve {:.3?}", curve.0);
    let (loss, ppl) = perplexity(&lm, held)?;
    println!("held-out loss {loss:.3} nats, perplexity {ppl:.2}");

    let pairs: Vec<_> = utts[50..]
        .iter()
        .enumerate()
        .map(|(i, u)| make_incoherent_pair(u, NuisanceKind::ALL[i % 4], &spec, [0.3, 0.7], i as u64).map(|p| (p.coherent, p.incoherent)))
        .collect::<llm_codec::Result<_>>()?;
    let coh = coherence_accuracy(&lm, &codec, &pairs)?;
    println!("coherence {:.2} over {} pairs", coh.accuracy, coh.scored);
    let (mean, _) = lm.sequence_nll(&held[0])?;
    println!("first held-out utterance: {mean:.3} nats/token");
    Ok(())
}
