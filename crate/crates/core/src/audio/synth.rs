//! Seeded synthetic "speech": each content symbol renders as a harmonic
//! burst at its own base frequency, perturbed by per-utterance nuisance.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_wav, NuisanceKind, NuisanceRecord, Utterance, Waveform};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];
const FADE_SECS: f64 = 0.005;
const CLIP: f64 = 1.2;

/// Inclusive bounds for each nuisance factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceRanges {
    pub gain: [f64; 2],
    pub pitch_offset: [f64; 2],
    pub noise_level: [f64; 2],
    pub smoothing: [f64; 2],
}

impl Default for NuisanceRanges {
    fn default() -> Self {
        Self {
            gain: [0.3, 1.0],
            pitch_offset: [-0.5, 0.5],
            noise_level: [0.0, 0.1],
            smoothing: [0.0, 0.8],
        }
    }
}

impl NuisanceRanges {
    pub fn range(&self, kind: NuisanceKind) -> [f64; 2] {
        match kind {
            NuisanceKind::Gain => self.gain,
            NuisanceKind::PitchOffset => self.pitch_offset,
            NuisanceKind::AdditiveNoise => self.noise_level,
            NuisanceKind::Smoothing => self.smoothing,
        }
    }

    pub fn contains(&self, r: &NuisanceRecord) -> bool {
        NuisanceKind::ALL.into_iter().all(|k| {
            let [lo, hi] = self.range(k);
            (lo..=hi).contains(&r.get(k))
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> NuisanceRecord {
        let draw = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        NuisanceRecord {
            gain: draw(rng, self.gain),
            pitch_offset: draw(rng, self.pitch_offset),
            noise_level: draw(rng, self.noise_level),
            smoothing: draw(rng, self.smoothing),
        }
    }

    fn validate(&self) -> Result<()> {
        for k in NuisanceKind::ALL {
            let [lo, hi] = self.range(k);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("nuisance range for {k} is invalid: [{lo}, {hi}]")));
            }
        }
        if self.gain[0] <= 0.0 {
            return Err(Error::Config("gain range must be positive".into()));
        }
        if self.noise_level[0] < 0.0 {
            return Err(Error::Config("noise level range must be nonnegative".into()));
        }
        if self.smoothing[0] < 0.0 || self.smoothing[1] >= 1.0 {
            return Err(Error::Config("smoothing range must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Either an explicit transition matrix or a seeded sparse random one where
/// every symbol has `branching` possible successors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grammar {
    Matrix(Vec<Vec<f64>>),
    Sparse { branching: usize, seed: u64 },
}

impl Grammar {
    pub fn transition_matrix(&self, vocab: usize) -> Result<Vec<Vec<f64>>> {
        let m = match self {
            Grammar::Matrix(m) => m.clone(),
            Grammar::Sparse { branching, seed } => {
                if *branching == 0 || *branching > vocab {
                    return Err(Error::Config(format!(
                        "grammar branching {branching} must be in 1..={vocab}"
                    )));
                }
                let mut rng = stream(*seed, &[tag::GRAMMAR]);
                (0..vocab)
                    .map(|_| {
                        let mut row = vec![0.0; vocab];
                        let picks = sample(&mut rng, vocab, *branching);
                        let w: Vec<f64> = picks.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
                        let total: f64 = w.iter().sum();
                        for (j, wj) in picks.iter().zip(&w) {
                            row[j] = wj / total;
                        }
                        row
                    })
                    .collect()
            }
        };
        if m.len() != vocab || m.iter().any(|r| r.len() != vocab) {
            return Err(Error::Config(format!("grammar must be {vocab} x {vocab}")));
        }
        for (i, row) in m.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "grammar row {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(m)
    }
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub content_vocab: usize,
    pub grammar: Grammar,
    /// Inclusive symbol-count bounds.
    pub utterance_length: [usize; 2],
    pub nuisance: NuisanceRanges,
    pub sample_rate: u32,
    pub symbol_duration: f64,
    /// Fundamental of symbol 0 in Hz.
    pub base_freq: f64,
    /// Semitones between consecutive symbols' fundamentals.
    pub symbol_spacing: f64,
    /// Peak amplitude before gain.
    pub peak: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 2000,
            content_vocab: 32,
            grammar: Grammar::Sparse { branching: 3, seed: 11 },
            utterance_length: [4, 8],
            nuisance: NuisanceRanges::default(),
            sample_rate: 16_000,
            symbol_duration: 0.08,
            base_freq: 110.0,
            symbol_spacing: 1.5,
            peak: 0.7,
        }
    }
}

impl CorpusSpec {
    pub fn symbol_len(&self) -> usize {
        (self.symbol_duration * self.sample_rate as f64).round() as usize
    }

    pub fn symbol_freq(&self, symbol: usize) -> f64 {
        self.base_freq * 2f64.powf(symbol as f64 * self.symbol_spacing / 12.0)
    }

    /// Checks every invariant and returns the resolved transition matrix.
    pub fn validate(&self) -> Result<Vec<Vec<f64>>> {
        if self.content_vocab == 0 {
            return Err(Error::Config("content vocabulary must be non-empty".into()));
        }
        let [lo, hi] = self.utterance_length;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("utterance length range [{lo}, {hi}] is invalid")));
        }
        if self.sample_rate == 0 || self.symbol_len() == 0 {
            return Err(Error::Config("symbols must span at least one sample".into()));
        }
        let top = self.symbol_freq(self.content_vocab - 1)
            * 2f64.powf(self.nuisance.pitch_offset[1] / 12.0)
            * HARMONICS.len() as f64;
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "highest overtone {top:.0} Hz is above Nyquist for {} Hz",
                self.sample_rate
            )));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(Error::Config("peak must lie in (0, 1]".into()));
        }
        self.nuisance.validate()?;
        self.grammar.transition_matrix(self.content_vocab)
    }
}

/// Renders `transcript` sample by sample. `nuisance_at(n)` gives the
/// settings in force at sample `n`; every stage is causal, so two renders
/// whose settings agree up to `n` agree on every sample before `n`.
pub fn render_utterance(
    spec: &CorpusSpec,
    transcript: &[usize],
    nuisance_at: &dyn Fn(usize) -> NuisanceRecord,
    noise_seed: u64,
) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let sym_len = spec.symbol_len();
    let fade = ((FADE_SECS * sr).round() as usize).clamp(1, (sym_len / 2).max(1));
    let norm = spec.peak / HARMONICS.iter().sum::<f64>();
    let mut noise = stream(noise_seed, &[tag::NOISE]);
    let mut out = Vec::with_capacity(transcript.len() * sym_len);
    let mut phase = 0.0;
    let mut smoothed = 0.0;
    for (n, &sym) in transcript.iter().flat_map(|s| std::iter::repeat_n(s, sym_len)).enumerate() {
        let pos = n % sym_len;
        if pos == 0 {
            phase = 0.0;
        }
        let p = nuisance_at(n);
        let f = spec.symbol_freq(sym) * 2f64.powf(p.pitch_offset / 12.0);
        let env = ((pos + 1) as f64 / fade as f64)
            .min((sym_len - pos) as f64 / fade as f64)
            .min(1.0);
        let tone: f64 = HARMONICS
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum();
        phase += 2.0 * std::f64::consts::PI * f / sr;
        let z: f64 = StandardNormal.sample(&mut noise);
        let dry = p.gain * norm * env * tone + p.noise_level * z;
        smoothed = (1.0 - p.smoothing) * dry + p.smoothing * smoothed;
        out.push(smoothed.clamp(-CLIP, CLIP));
    }
    out
}

/// Generates `spec.n_utterances` utterances. Utterance `i` draws from its
/// own stream keyed by `(seed, i)`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Utterance>> {
    let grammar = spec.validate()?;
    (0..spec.n_utterances)
        .map(|i| generate_one(spec, &grammar, seed, i as u64))
        .collect()
}

fn generate_one(spec: &CorpusSpec, grammar: &[Vec<f64>], seed: u64, index: u64) -> Result<Utterance> {
    let mut rng = stream(seed, &[tag::CORPUS, index]);
    let [lo, hi] = spec.utterance_length;
    let len = rng.gen_range(lo..=hi);
    let mut transcript = vec![rng.gen_range(0..spec.content_vocab)];
    while transcript.len() < len {
        let row = &grammar[*transcript.last().unwrap()];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        transcript.push(next);
    }
    let nuisance = spec.nuisance.sample(&mut rng);
    let noise_seed: u64 = rng.gen();
    let samples = render_utterance(spec, &transcript, &|_| nuisance, noise_seed);
    Ok(Utterance {
        audio: Waveform::new(samples, spec.sample_rate)?,
        transcript,
        nuisance,
        noise_seed,
    })
}

/// A coherent rendering and one whose `factor` switches mid-utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct IncoherentPair {
    pub coherent: Waveform,
    pub incoherent: Waveform,
    pub split_frac: f64,
    pub split_index: usize,
    /// Value of the switched factor after the split.
    pub switched_to: f64,
}

/// Re-renders `u` coherently and with `factor` resampled from
/// `split_frac * duration` onwards. The new value differs from the old one
/// by at least a quarter of the factor's range.
pub fn make_incoherent_pair(
    u: &Utterance,
    factor: NuisanceKind,
    spec: &CorpusSpec,
    split_range: [f64; 2],
    seed: u64,
) -> Result<IncoherentPair> {
    let [lo, hi] = spec.nuisance.range(factor);
    if hi <= lo {
        return Err(Error::Config(format!("{factor} has a degenerate range and cannot be switched")));
    }
    let [s_lo, s_hi] = split_range;
    if !(0.0 < s_lo && s_lo <= s_hi && s_hi < 1.0) {
        return Err(Error::Config(format!("split range [{s_lo}, {s_hi}] must lie inside (0, 1)")));
    }
    let mut rng = stream(seed, &[tag::PAIR]);
    let split_frac = if s_hi > s_lo { rng.gen_range(s_lo..=s_hi) } else { s_lo };
    let before = u.nuisance.get(factor);
    let min_gap = 0.25 * (hi - lo);
    let mut after = None;
    for _ in 0..64 {
        let v = rng.gen_range(lo..=hi);
        if (v - before).abs() >= min_gap {
            after = Some(v);
            break;
        }
    }
    let after = after.unwrap_or(if before - lo > hi - before { lo } else { hi });
    let len = u.transcript.len() * spec.symbol_len();
    let split_index = ((split_frac * len as f64).round() as usize).min(len);
    let base = u.nuisance;
    let switched = base.with(factor, after);
    let coherent = render_utterance(spec, &u.transcript, &|_| base, u.noise_seed);
    let incoherent = render_utterance(
        spec,
        &u.transcript,
        &|n| if n < split_index { base } else { switched },
        u.noise_seed,
    );
    Ok(IncoherentPair {
        coherent: Waveform::new(coherent, spec.sample_rate)?,
        incoherent: Waveform::new(incoherent, spec.sample_rate)?,
        split_frac,
        split_index,
        switched_to: after,
    })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub transcript: Vec<usize>,
    pub nuisance: NuisanceRecord,
}

/// Writes each utterance as `utt_NNNNN.wav` plus a `manifest.jsonl`.
pub fn write_corpus(dir: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for (i, u) in utterances.iter().enumerate() {
        let name = format!("utt_{i:05}.wav");
        write_wav(dir.join(&name), &u.audio)?;
        let rec = ManifestRecord {
            path: name,
            transcript: u.transcript.clone(),
            nuisance: u.nuisance,
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_utterances: 2,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small(), 7).unwrap();
        let b = generate_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(), 8).unwrap();
        assert_ne!(a[0].audio, c[0].audio);
    }

    #[test]
    fn five_symbols_render_to_6400_samples() {
        let spec = small();
        let n = NuisanceRecord {
            gain: 1.0,
            pitch_offset: 0.0,
            noise_level: 0.0,
            smoothing: 0.0,
        };
        let s = render_utterance(&spec, &[0, 1, 2, 3, 4], &|_| n, 0);
        assert_eq!(s.len(), 6400);
    }

    #[test]
    fn lengths_and_nuisance_stay_in_range() {
        let spec = CorpusSpec {
            n_utterances: 40,
            ..CorpusSpec::default()
        };
        for u in generate_corpus(&spec, 3).unwrap() {
            assert!((4..=8).contains(&u.transcript.len()));
            assert!(spec.nuisance.contains(&u.nuisance));
            assert_eq!(u.audio.len(), u.transcript.len() * 1280);
            assert!(u.audio.samples().iter().all(|v| v.abs() <= 1.2));
        }
    }

    #[test]
    fn bad_grammar_row_is_a_config_error() {
        let spec = CorpusSpec {
            content_vocab: 2,
            grammar: Grammar::Matrix(vec![vec![0.5, 0.5], vec![0.7, 0.2]]),
            ..small()
        };
        assert!(matches!(generate_corpus(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn transcripts_follow_the_grammar() {
        let spec = CorpusSpec {
            n_utterances: 30,
            ..CorpusSpec::default()
        };
        let g = spec.validate().unwrap();
        for u in generate_corpus(&spec, 1).unwrap() {
            for w in u.transcript.windows(2) {
                assert!(g[w[0]][w[1]] > 0.0);
            }
        }
    }

    #[test]
    fn incoherent_pair_shares_prefix_and_switches_gain() {
        let spec = small();
        let u = &generate_corpus(&spec, 5).unwrap()[0];
        let p = make_incoherent_pair(u, NuisanceKind::Gain, &spec, [0.3, 0.7], 9).unwrap();
        assert_eq!(p.coherent, u.audio);
        assert!((0.3..=0.7).contains(&p.split_frac));
        assert_eq!(&p.coherent.samples()[..p.split_index], &p.incoherent.samples()[..p.split_index]);
        assert_ne!(p.coherent.samples()[p.split_index..], p.incoherent.samples()[p.split_index..]);
        assert_ne!(p.switched_to, u.nuisance.gain);
        let q = make_incoherent_pair(u, NuisanceKind::Gain, &spec, [0.3, 0.7], 9).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn unknown_factor_name_is_a_config_error() {
        assert!(matches!("reverb".parse::<NuisanceKind>(), Err(Error::Config(_))));
        assert_eq!("pitch-offset".parse::<NuisanceKind>().unwrap(), NuisanceKind::PitchOffset);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small(), 2).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let recs = read_manifest(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].transcript, corpus[1].transcript);
        let w = crate::audio::read_wav(dir.path().join(&recs[0].path)).unwrap();
        assert_eq!(w.len(), corpus[0].audio.len());
    }
}
