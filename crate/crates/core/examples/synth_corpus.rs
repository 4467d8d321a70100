//! Renders a small synthetic corpus, writes it as WAV plus a manifest, and
//! builds one incoherent pair per nuisance factor.

use llm_codec::audio::{generate_corpus, make_incoherent_pair, read_manifest, write_corpus, CorpusSpec, NuisanceKind};

fn main() -> llm_codec::Result<()> {
    let spec = CorpusSpec {
        n_utterances: 8,
        ..CorpusSpec::default()
    };
    let utts = generate_corpus(&spec, 7)?;
    for u in &utts[..3] {
        println!(
            "{:.2}s transcript {:?} gain {:.2} noise {:.3}",
            u.audio.duration_secs(),
            u.transcript,
            u.nuisance.gain,
            u.nuisance.noise_level
        );
    }

    let dir = std::env::temp_dir().join("llm-codec-corpus");
    write_corpus(&dir, &utts)?;
    let manifest = read_manifest(dir.join("manifest.jsonl"))?;
    println!("wrote {} utterances to {}", manifest.len(), dir.display());

    for (i, kind) in NuisanceKind::ALL.into_iter().enumerate() {
        let p = make_incoherent_pair(&utts[0], kind, &spec, [0.3, 0.7], i as u64)?;
        let diverged = p
            .coherent
            .samples()
            .iter()
            .zip(p.incoherent.samples())
            .position(|(a, b)| a != b);
        println!(
            "{:<14} split at {:.2} -> {:.3}, first differing sample {:?}",
            kind.name(),
            p.split_frac,
            p.switched_to,
            diverged
        );
    }
    Ok(())
}
