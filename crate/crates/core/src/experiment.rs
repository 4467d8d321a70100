//! The comparison pipeline: one shared warm start per seed, forked into the
//! reconstruction-only control and the objective variants, each followed by
//! token-LM training and evaluation on held-out audio.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{generate_corpus, make_incoherent_pair, NuisanceKind, Utterance, Waveform};
use crate::backbone::train_token_lm;
use crate::codec::Codec;
use crate::config::{Objectives, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{coherence_accuracy, mel_distance, perplexity, stft_distance, CoherenceResult, MetricRecord};
use crate::rng::{derive_seed, tag};
use crate::trainer::{TrainData, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Full,
    FtpOnly,
    SaOnly,
    /// Full objectives with a single prediction head.
    FullK1,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Full,
        Variant::FtpOnly,
        Variant::SaOnly,
        Variant::FullK1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::FtpOnly => "ftp-only",
            Variant::SaOnly => "sa-only",
            Variant::FullK1 => "full-k1",
        }
    }

    pub fn objectives(self) -> Objectives {
        match self {
            Variant::Baseline => Objectives::baseline(),
            Variant::Full | Variant::FullK1 => Objectives::full(),
            Variant::FtpOnly => Objectives {
                bridge: true,
                ftp: true,
                sa: false,
            },
            Variant::SaOnly => Objectives {
                bridge: true,
                ftp: false,
                sa: true,
            },
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Corpus split into training and held-out utterances.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

pub fn split_corpus(mut utts: Vec<Utterance>, heldout_fraction: f64) -> Result<Split> {
    let n_held = (utts.len() as f64 * heldout_fraction).round() as usize;
    if n_held == 0 || n_held >= utts.len() {
        return Err(Error::Config(format!(
            "held-out fraction {heldout_fraction} leaves an empty side of {} utterances",
            utts.len()
        )));
    }
    let heldout = utts.split_off(utts.len() - n_held);
    Ok(Split { train: utts, heldout })
}

/// Metrics of one trained codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub lm_loss: f64,
    pub ppl: f64,
    pub coherence: f64,
    pub coherence_scored: usize,
    pub coherence_excluded: usize,
    pub mel: f64,
    pub stft: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

impl VariantResult {
    pub fn run_id(&self) -> String {
        format!("seed{}-{}", self.seed, self.variant.name())
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, value: f64, n: usize| MetricRecord {
            run_id: self.run_id(),
            config_hash: self.config_hash.clone(),
            metric: metric.into(),
            value,
            n,
        };
        vec![
            rec("lm_loss", self.lm_loss, 0),
            rec("ppl", self.ppl, 0),
            rec("coherence_accuracy", self.coherence, self.coherence_scored),
            rec("mel_distance", self.mel, 0),
            rec("stft_distance", self.stft, 0),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
    pub warm_start_secs: f64,
}

impl SeedResult {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Token streams and evaluation inputs shared by every variant of a seed.
pub struct EvalSet {
    pub train_audio: Vec<Waveform>,
    pub heldout_audio: Vec<Waveform>,
    pub pairs: Vec<(Waveform, Waveform)>,
    pub recon: Vec<Waveform>,
}

/// Builds `count` coherent/incoherent pairs from `utts`, cycling through
/// the nuisance factors.
pub fn coherence_pairs(cfg: &RunConfig, utts: &[Utterance], count: usize, seed: u64) -> Result<Vec<(Waveform, Waveform)>> {
    if utts.is_empty() {
        return Err(Error::Config("no utterances to build pairs from".into()));
    }
    (0..count)
        .map(|i| {
            let factor = NuisanceKind::ALL[i % NuisanceKind::ALL.len()];
            let u = &utts[i % utts.len()];
            let p = make_incoherent_pair(u, factor, &cfg.corpus, cfg.eval.split_range, derive_seed(seed, &[tag::PAIR, i as u64]))?;
            Ok((p.coherent, p.incoherent))
        })
        .collect()
}

impl EvalSet {
    pub fn new(cfg: &RunConfig, split: &Split, seed: u64) -> Result<Self> {
        let n_recon = cfg.eval.recon_utterances.min(split.heldout.len());
        Ok(Self {
            train_audio: split.train.iter().map(|u| u.audio.clone()).collect(),
            heldout_audio: split.heldout.iter().map(|u| u.audio.clone()).collect(),
            pairs: coherence_pairs(cfg, &split.heldout, cfg.eval.coherence_pairs, seed)?,
            recon: split.heldout[..n_recon].iter().map(|u| u.audio.clone()).collect(),
        })
    }
}

fn truncate(w: &Waveform, len: usize) -> Result<Waveform> {
    Waveform::new(w.samples()[..len].to_vec(), w.sample_rate())
}

/// Mean mel and STFT distances between held-out audio and its
/// reconstruction, compared over the reconstructed length.
pub fn recon_metrics(codec: &Codec, audio: &[Waveform]) -> Result<(f64, f64)> {
    if audio.is_empty() {
        return Err(Error::Config("no held-out audio for reconstruction metrics".into()));
    }
    let (mut mel, mut stft) = (0.0, 0.0);
    for w in audio {
        let y = codec.reconstruct(w)?;
        let x = truncate(w, y.len())?;
        mel += mel_distance(&x, &y)?;
        stft += stft_distance(&x, &y)?;
    }
    Ok((mel / audio.len() as f64, stft / audio.len() as f64))
}

/// Trains a token LM on the codec's tokens of the training audio and scores
/// held-out perplexity and pair coherence.
pub fn lm_metrics(cfg: &RunConfig, codec: &Codec, set: &EvalSet, seed: u64) -> Result<(f64, f64, CoherenceResult)> {
    let tokens = set.train_audio.iter().map(|w| codec.tokenize(w)).collect::<Result<Vec<_>>>()?;
    let held = set.heldout_audio.iter().map(|w| codec.tokenize(w)).collect::<Result<Vec<_>>>()?;
    let (lm, curve) = train_token_lm(&tokens, &cfg.token_lm, cfg.token_lm.epochs, derive_seed(seed, &[tag::LM]))?;
    log::info!("token LM loss curve {:?}", curve.0);
    let (loss, ppl) = perplexity(&lm, &held)?;
    let coh = coherence_accuracy(&lm, codec, &set.pairs)?;
    Ok((loss, ppl, coh))
}

/// Evaluates one trained trainer.
pub fn evaluate(tr: &Trainer, variant: Variant, set: &EvalSet, train_secs: f64) -> Result<VariantResult> {
    let t = Instant::now();
    let codec = &tr.models.codec;
    let (lm_loss, ppl, coh) = lm_metrics(&tr.cfg, codec, set, tr.seed)?;
    let (mel, stft) = recon_metrics(codec, &set.recon)?;
    Ok(VariantResult {
        variant,
        seed: tr.seed,
        config_hash: tr.config_hash(),
        lm_loss,
        ppl,
        coherence: coh.accuracy,
        coherence_scored: coh.scored,
        coherence_excluded: coh.excluded,
        mel,
        stft,
        train_secs,
        eval_secs: t.elapsed().as_secs_f64(),
    })
}

/// Prepares the forked trainer for `variant` from the shared warm start.
pub fn fork(warm: &Trainer, variant: Variant) -> Result<Trainer> {
    let mut tr = warm.clone();
    tr.set_objectives(variant.objectives());
    if variant == Variant::FullK1 {
        tr.reset_heads(1)?;
    }
    Ok(tr)
}

/// Codec warm start and the discriminator-only phase, which no LLM-side
/// objective influences.
pub fn warm_start(cfg: &RunConfig, seed: u64, data: &TrainData) -> Result<Trainer> {
    let mut tr = Trainer::new(cfg.clone(), seed, data)?;
    let curve = tr.pretrain_codec(data)?;
    if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
        log::info!("seed {seed}: codec warm start {a:.3} -> {b:.3}");
    }
    tr.run_until(data, cfg.schedule.boundaries().d_only_until, None)?;
    Ok(tr)
}

/// Runs every variant for one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64, variants: &[Variant]) -> Result<SeedResult> {
    cfg.validate()?;
    let t = Instant::now();
    let split = split_corpus(generate_corpus(&cfg.corpus, seed)?, cfg.train.heldout_fraction)?;
    let data = TrainData::new(&split.train, cfg)?;
    let set = EvalSet::new(cfg, &split, seed)?;
    let warm = warm_start(cfg, seed, &data)?;
    let warm_start_secs = t.elapsed().as_secs_f64();
    let total = cfg.schedule.boundaries().total;
    let mut results = Vec::new();
    for &v in variants {
        let t = Instant::now();
        let mut tr = fork(&warm, v)?;
        tr.run_until(&data, total, None)?;
        let r = evaluate(&tr, v, &set, t.elapsed().as_secs_f64())?;
        log::info!(
            "seed {seed} {}: ppl {:.2} coherence {:.3} mel {:.3} ({:.0}s train)",
            v.name(),
            r.ppl,
            r.coherence,
            r.mel,
            r.train_secs
        );
        results.push(r);
    }
    Ok(SeedResult {
        seed,
        variants: results,
        warm_start_secs,
    })
}

/// Outcome of the directional checks for one variant against the control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub variant: Variant,
    pub ppl_ratio: f64,
    pub coherence_gain: f64,
    pub mel_ratio: f64,
}

impl Comparison {
    pub fn of(seed: &SeedResult, v: Variant) -> Option<Self> {
        let b = seed.get(Variant::Baseline)?;
        let r = seed.get(v)?;
        Some(Self {
            seed: seed.seed,
            variant: v,
            ppl_ratio: b.ppl / r.ppl,
            coherence_gain: r.coherence - b.coherence,
            mel_ratio: r.mel / b.mel,
        })
    }

    pub fn learnability(&self) -> bool {
        self.ppl_ratio >= 1.5
    }

    pub fn coherence(&self) -> bool {
        self.coherence_gain >= 0.05
    }

    pub fn fidelity(&self) -> bool {
        self.mel_ratio <= 1.10
    }
}

/// Comparison table rows for every non-control variant.
pub fn comparison_rows(seeds: &[SeedResult]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for s in seeds {
        for r in &s.variants {
            let c = Comparison::of(s, r.variant);
            rows.push(vec![
                r.run_id(),
                format!("{:.3}", r.ppl),
                format!("{:.3}", r.coherence),
                format!("{:.4}", r.mel),
                format!("{:.4}", r.stft),
                c.as_ref().map_or("-".into(), |c| format!("{:.2}", c.ppl_ratio)),
                c.as_ref().map_or("-".into(), |c| format!("{:+.3}", c.coherence_gain)),
            ]);
        }
    }
    rows
}

/// One line of the comparison report: every variant of one seed against
/// its control, or the aggregate over seeds when `seed` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub seeds: usize,
    pub variant: Variant,
    pub ppl_ratio: f64,
    pub coherence_gain: f64,
    pub mel_ratio: f64,
    /// Seeds meeting the perplexity, coherence and fidelity margins.
    pub learnability_pass: usize,
    pub coherence_pass: usize,
    pub fidelity_pass: usize,
}

impl ComparisonRecord {
    fn from_comparisons(config_hash: &str, seed: Option<u64>, v: Variant, cs: &[Comparison]) -> Self {
        let n = cs.len() as f64;
        let mean = |f: fn(&Comparison) -> f64| cs.iter().map(f).sum::<f64>() / n;
        Self {
            config_hash: config_hash.to_string(),
            seed,
            seeds: cs.len(),
            variant: v,
            ppl_ratio: mean(|c| c.ppl_ratio),
            coherence_gain: mean(|c| c.coherence_gain),
            mel_ratio: mean(|c| c.mel_ratio),
            learnability_pass: cs.iter().filter(|c| c.learnability()).count(),
            coherence_pass: cs.iter().filter(|c| c.coherence()).count(),
            fidelity_pass: cs.iter().filter(|c| c.fidelity()).count(),
        }
    }
}

/// Per-seed comparison records followed by one aggregate per variant.
pub fn comparison_records(config_hash: &str, seeds: &[SeedResult]) -> Vec<ComparisonRecord> {
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|&v| v != Variant::Baseline && seeds.iter().any(|s| s.get(v).is_some()))
        .collect();
    let mut out = Vec::new();
    for s in seeds {
        for &v in &variants {
            if let Some(c) = Comparison::of(s, v) {
                out.push(ComparisonRecord::from_comparisons(config_hash, Some(s.seed), v, &[c]));
            }
        }
    }
    for &v in &variants {
        let cs: Vec<Comparison> = seeds.iter().filter_map(|s| Comparison::of(s, v)).collect();
        if !cs.is_empty() {
            out.push(ComparisonRecord::from_comparisons(config_hash, None, v, &cs));
        }
    }
    out
}

/// Runs `variants` for each seed in turn.
pub fn run_experiment(cfg: &RunConfig, seeds: &[u64], variants: &[Variant]) -> Result<Vec<SeedResult>> {
    if !variants.contains(&Variant::Baseline) {
        return Err(Error::Config("the experiment needs the baseline variant".into()));
    }
    seeds.iter().map(|&s| run_seed(cfg, s, variants)).collect()
}

pub const TABLE_HEADERS: [&str; 7] = ["run", "ppl", "coherence", "mel", "stft", "ppl ratio", "coh gain"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("other".parse::<Variant>().is_err());
        assert!(!Variant::Baseline.objectives().lm_branch());
        assert!(!Variant::FtpOnly.objectives().sa && !Variant::SaOnly.objectives().ftp);
    }

    #[test]
    fn split_keeps_every_utterance() {
        let spec = crate::audio::CorpusSpec {
            n_utterances: 20,
            ..Default::default()
        };
        let utts = generate_corpus(&spec, 3).unwrap();
        let s = split_corpus(utts.clone(), 0.1).unwrap();
        assert_eq!((s.train.len(), s.heldout.len()), (18, 2));
        assert_eq!(s.heldout[1], utts[19]);
        assert!(split_corpus(utts, 0.0).is_err());
    }
}
