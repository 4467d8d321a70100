//! Encodes an utterance into 50 Hz codebook tokens and decodes it again.
//! The codec is untrained here, so the point is the plumbing, not quality.

use llm_codec::audio::{generate_corpus, CorpusSpec};
use llm_codec::codec::{Codec, CodecConfig};
use llm_codec::eval::{mel_distance, stft_distance};

fn main() -> llm_codec::Result<()> {
    let spec = CorpusSpec {
        n_utterances: 1,
        ..CorpusSpec::default()
    };
    let utt = &generate_corpus(&spec, 3)?[0];
    let codec = Codec::new(CodecConfig::default(), 0)?;

    let latents = codec.latents(&utt.audio)?;
    let tokens = codec.tokenize(&utt.audio)?;
    println!(
        "{} samples -> {} frames of {} at {} Hz",
        utt.audio.len(),
        latents.frames.dim(0),
        latents.frames.dim(1),
        latents.frame_rate
    );
    println!("tokens {:?}", &tokens[..tokens.len().min(16)]);

    let rec = codec.detokenize(&tokens)?;
    let reference = llm_codec::audio::Waveform::new(utt.audio.samples()[..rec.len()].to_vec(), rec.sample_rate())?;
    println!(
        "mel distance {:.3}, stft distance {:.3}",
        mel_distance(&reference, &rec)?,
        stft_distance(&reference, &rec)?
    );
    Ok(())
}
