//! Evaluation metrics: spectral distances, token perplexity, likelihood
//! contrast coherence accuracy, and report emission.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use autodiff::StftPlan;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::backbone::SequenceScorer;
use crate::codec::{Codec, TokenSequence};
use crate::error::{Error, Result};
use crate::spectral::log_mel;

pub const MEL_BINS: usize = 100;
pub const MEL_FFT: usize = 1024;
pub const MEL_HOP: usize = 256;
pub const STFT_SIZES: [usize; 3] = [512, 1024, 2048];
const LOG_FLOOR: f64 = 1e-5;
const SC_EPS: f64 = 1e-12;

fn same_length(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("reference has {} samples, estimate {}", a.len(), b.len())));
    }
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::Shape("sample rates differ".into()));
    }
    Ok(())
}

/// Mean absolute difference of log-mel spectrograms, without loudness
/// normalization.
pub fn mel_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_length(reference, estimate)?;
    let a = log_mel(reference, MEL_BINS, MEL_FFT, MEL_HOP)?;
    let b = log_mel(estimate, MEL_BINS, MEL_FFT, MEL_HOP)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| {
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            x[j as usize]
        })
        .collect()
}

/// Magnitudes of the centered STFT, `[frames, bins]` flattened.
pub fn stft_magnitudes(x: &[f64], fft: usize) -> Vec<f64> {
    let plan = StftPlan::hann_normalized(fft, fft / 4);
    let s = plan.forward(&reflect_pad(x, fft / 2));
    let half = s.numel() / 2;
    let (re, im) = s.data().split_at(half);
    re.iter().zip(im).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

/// Spectral convergence plus mean log-magnitude error for two magnitude
/// arrays of one resolution.
pub fn magnitude_distance(mx: &[f64], my: &[f64]) -> f64 {
    let num = mx.iter().zip(my).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den = mx.iter().map(|a| a * a).sum::<f64>().sqrt() + SC_EPS;
    let log_l1 = mx
        .iter()
        .zip(my)
        .map(|(a, b)| ((a + LOG_FLOOR).ln() - (b + LOG_FLOOR).ln()).abs())
        .sum::<f64>()
        / mx.len() as f64;
    num / den + log_l1
}

/// Multi-resolution STFT distance summed over the three FFT sizes.
pub fn stft_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_length(reference, estimate)?;
    let max_fft = STFT_SIZES[STFT_SIZES.len() - 1];
    if reference.len() <= max_fft / 2 {
        return Err(Error::Shape(format!(
            "signals of {} samples too short for fft {max_fft}",
            reference.len()
        )));
    }
    Ok(STFT_SIZES
        .iter()
        .map(|&fft| {
            magnitude_distance(
                &stft_magnitudes(reference.samples(), fft),
                &stft_magnitudes(estimate.samples(), fft),
            )
        })
        .sum())
}

/// Token-weighted mean next-token NLL and its exponential.
pub fn perplexity(lm: &dyn SequenceScorer, corpus: &[TokenSequence]) -> Result<(f64, f64)> {
    if corpus.is_empty() {
        return Err(Error::Config("perplexity needs a non-empty corpus".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for seq in corpus {
        let (_, per) = lm.sequence_nll(seq)?;
        total += per.iter().sum::<f64>();
        count += per.len();
    }
    if count == 0 {
        return Err(Error::Config("corpus has no predictable positions".into()));
    }
    let mean = total / count as f64;
    Ok((mean, ppl_from_loss(mean)))
}

pub fn ppl_from_loss(loss: f64) -> f64 {
    loss.exp()
}

/// Anything that turns audio into codec tokens.
pub trait Tokenizer {
    fn tokenize(&self, w: &Waveform) -> Result<TokenSequence>;
}

impl Tokenizer for Codec {
    fn tokenize(&self, w: &Waveform) -> Result<TokenSequence> {
        Codec::tokenize(self, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub accuracy: f64,
    pub scored: usize,
    pub excluded: usize,
    /// Per scored pair: mean NLL of the coherent and incoherent members.
    pub nlls: Vec<(f64, f64)>,
}

/// Fraction of pairs whose coherent member receives strictly lower mean
/// per-token NLL. Pairs that fail to tokenize or score are excluded and
/// counted.
pub fn coherence_accuracy(lm: &dyn SequenceScorer, tokenizer: &dyn Tokenizer, pairs: &[(Waveform, Waveform)]) -> Result<CoherenceResult> {
    if pairs.is_empty() {
        return Err(Error::Config("coherence evaluation needs at least one pair".into()));
    }
    let score = |w: &Waveform| -> Result<f64> {
        let tokens = tokenizer.tokenize(w)?;
        let (mean, per) = lm.sequence_nll(&tokens)?;
        if per.is_empty() {
            return Err(Error::Shape("too few tokens to score".into()));
        }
        Ok(mean)
    };
    let mut nlls = Vec::new();
    let mut excluded = 0;
    for (i, (c, x)) in pairs.iter().enumerate() {
        match (score(c), score(x)) {
            (Ok(a), Ok(b)) => nlls.push((a, b)),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("pair {i} excluded: {e}");
                excluded += 1;
            }
        }
    }
    let correct = nlls.iter().filter(|(a, b)| a < b).count();
    let accuracy = if nlls.is_empty() { 0.0 } else { correct as f64 / nlls.len() as f64 };
    Ok(CoherenceResult {
        accuracy,
        scored: nlls.len(),
        excluded,
        nlls,
    })
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// Writes one JSON line per record. Non-finite values are rejected.
pub fn write_report(records: &[MetricRecord], path: &Path) -> Result<()> {
    if let Some(bad) = records.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::NonFinite(format!("metric {}", bad.metric)));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Plain-text table with right-aligned numeric columns.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

/// Mean of a metric over waveform pairs.
pub fn mean_over<F>(pairs: &[(Waveform, Waveform)], f: F) -> Result<f64>
where
    F: Fn(&Waveform, &Waveform) -> Result<f64>,
{
    if pairs.is_empty() {
        return Err(Error::Config("no waveforms to evaluate".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += f(a, b)?;
    }
    Ok(total / pairs.len() as f64)
}
