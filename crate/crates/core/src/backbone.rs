//! The frozen causal LM backbone with an extended audio vocabulary, and
//! the small token LMs trained from scratch for evaluation.

use std::path::Path;

use autodiff::{log_softmax_rows, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::optim::{GradMap, Optimizer, OptimizerConfig};
use crate::params::{hex_digest, init_normal, ParamStore};
use crate::rng::{stream, tag};
use crate::transformer::{init_blocks, run_blocks, TransformerShape};

pub const AUDIO_EMBED: &str = "backbone/audio_embed";
const TEXT_EMBED: &str = "backbone/text_embed";
const LM_HEAD: &str = "backbone/lm_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub max_seq: usize,
    /// Relative std of the perturbation added to copied audio rows.
    pub audio_init_perturb: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: 128,
            heads: 4,
            mlp_mult: 4,
            text_vocab: 64,
            audio_vocab: 256,
            max_seq: 64,
            audio_init_perturb: 0.01,
            pretrain_steps: 300,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
        }
    }
}

impl BackboneConfig {
    pub fn shape(&self) -> TransformerShape {
        TransformerShape {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            mlp_mult: self.mlp_mult,
            max_seq: self.max_seq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.audio_vocab < 2 || self.text_vocab < 1 {
            return Err(Error::Config("vocabularies too small".into()));
        }
        Ok(())
    }
}

/// Forward results of the backbone.
pub struct BackboneOutput<'t> {
    /// Output of every block, `[T, H]` each.
    pub hidden: Vec<Var<'t>>,
    pub final_normed: Var<'t>,
    /// `[T, text_vocab + audio_vocab]` when requested.
    pub logits: Option<Var<'t>>,
}

/// Frozen transformer with trainable audio-token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
}

fn copy_rows_with_noise(src: &Tensor, picks: &[usize], rel_std: f64, rng: &mut impl Rng) -> Tensor {
    let h = src.dim(1);
    let mut out = Vec::with_capacity(picks.len() * h);
    for &r in picks {
        let row = src.row(r);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / h as f64).sqrt();
        let noise = init_normal(rng, &[h], rel_std * rms);
        out.extend(row.iter().zip(noise.data()).map(|(a, b)| a + b));
    }
    Tensor::new(&[picks.len(), h], out)
}

/// Deterministically initialized backbone. Audio rows of the embedding
/// table and of the output head copy randomly chosen text rows plus a
/// small Gaussian perturbation.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = stream(seed, &[tag::INIT, 2]);
    let mut params = ParamStore::new();
    let h = cfg.hidden;
    params.insert(TEXT_EMBED, init_normal(&mut rng, &[cfg.text_vocab, h], 1.0));
    params.insert(AUDIO_EMBED, Tensor::zeros(&[cfg.audio_vocab, h]));
    init_blocks(&mut params, "backbone", &cfg.shape(), &mut rng);
    params.insert(
        LM_HEAD,
        init_normal(&mut rng, &[cfg.text_vocab + cfg.audio_vocab, h], 1.0 / (h as f64).sqrt()),
    );
    let mut b = Backbone {
        cfg: cfg.clone(),
        params,
    };
    b.reinit_audio_rows(seed);
    Ok(b)
}

impl Backbone {
    /// Re-derives audio rows from the current text rows.
    pub fn reinit_audio_rows(&mut self, seed: u64) {
        let mut rng = stream(seed, &[tag::INIT, 3]);
        let (vt, va) = (self.cfg.text_vocab, self.cfg.audio_vocab);
        let picks: Vec<usize> = (0..va).map(|_| rng.gen_range(0..vt)).collect();
        let eps = self.cfg.audio_init_perturb;
        let emb = copy_rows_with_noise(self.params.get(TEXT_EMBED), &picks, eps, &mut rng);
        self.params.insert(AUDIO_EMBED, emb);
        let mut head = self.params.get(LM_HEAD).clone();
        let text_head = Tensor::new(&[vt, self.cfg.hidden], head.data()[..vt * self.cfg.hidden].to_vec());
        let audio_head = copy_rows_with_noise(&text_head, &picks, eps, &mut rng);
        head.data_mut()[vt * self.cfg.hidden..].copy_from_slice(audio_head.data());
        self.params.insert(LM_HEAD, head);
    }

    /// Ids of the audio rows within the output head.
    pub fn audio_ids(&self) -> Vec<usize> {
        (self.cfg.text_vocab..self.cfg.text_vocab + self.cfg.audio_vocab).collect()
    }

    pub fn lm_head(&self) -> &Tensor {
        self.params.get(LM_HEAD)
    }

    /// Hash of every frozen parameter (everything except audio embeddings).
    pub fn frozen_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| n.as_str() != AUDIO_EMBED) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn embed_text<'t>(&self, tape: &'t Tape, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.text_vocab) {
            return Err(Error::Index(format!("text id {bad} outside vocabulary of {}", self.cfg.text_vocab)));
        }
        Ok(tape.constant(self.params.get(TEXT_EMBED).clone()).index_select0(ids))
    }

    /// Audio-row lookup; the rows are trainable when `trainable` is set.
    pub fn embed_audio<'t>(&self, tape: &'t Tape, ids: &[usize], trainable: bool) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.audio_vocab) {
            return Err(Error::Index(format!("audio id {bad} outside vocabulary of {}", self.cfg.audio_vocab)));
        }
        Ok(self.params.bind(tape, AUDIO_EMBED, trainable).index_select0(ids))
    }

    pub fn audio_embed_var<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        self.params.bind(tape, AUDIO_EMBED, trainable)
    }

    /// Runs the frozen blocks over `[T, H]` embeddings.
    pub fn forward_hidden<'t>(&self, tape: &'t Tape, embeddings: Var<'t>, with_logits: bool) -> Result<BackboneOutput<'t>> {
        self.forward_with(tape, embeddings, with_logits, false)
    }

    fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        embeddings: Var<'t>,
        with_logits: bool,
        trainable: bool,
    ) -> Result<BackboneOutput<'t>> {
        let out = run_blocks(&self.params, "backbone", &self.cfg.shape(), tape, embeddings, trainable)?;
        let logits = with_logits.then(|| out.final_normed.matmul_t(self.params.bind(tape, LM_HEAD, trainable)));
        Ok(BackboneOutput {
            hidden: out.layers,
            final_normed: out.final_normed,
            logits,
        })
    }

    /// Brief next-token pretraining on text sequences. Every parameter but
    /// the audio rows trains; audio rows are re-derived afterwards.
    pub fn pretrain_on_text(&mut self, texts: &[Vec<usize>], seed: u64) -> Result<Vec<f64>> {
        let usable: Vec<&Vec<usize>> = texts.iter().filter(|t| t.len() >= 2).collect();
        if usable.is_empty() || self.cfg.pretrain_steps == 0 {
            return Ok(Vec::new());
        }
        let mut opt = Optimizer::new(OptimizerConfig::adamw(self.cfg.pretrain_lr));
        let mut rng = stream(seed, &[tag::LM, 1]);
        let mut curve = Vec::with_capacity(self.cfg.pretrain_steps);
        for _ in 0..self.cfg.pretrain_steps {
            let tape = Tape::new();
            let mut terms = Vec::new();
            let mut count = 0usize;
            for _ in 0..self.cfg.pretrain_batch {
                let seq = usable[rng.gen_range(0..usable.len())];
                let seq = &seq[..seq.len().min(self.cfg.max_seq)];
                let x = self.params.bind(&tape, TEXT_EMBED, true).index_select0(&seq[..seq.len() - 1]);
                let out = self.forward_with(&tape, x, true, true)?;
                let logits = out.logits.expect("requested");
                terms.push(logits.cross_entropy_weighted(&seq[1..], &vec![1.0; seq.len() - 1]));
                count += seq.len() - 1;
            }
            let loss = terms.into_iter().reduce(|a, b| a + b).unwrap().scale(1.0 / count as f64);
            curve.push(loss.item());
            let mut grads = GradMap::new();
            grads.accumulate(&loss.backward(), 1.0);
            opt.step(&mut self.params, &grads, 1.0);
        }
        self.reinit_audio_rows(seed);
        Ok(curve)
    }
}

/// Next-token negative log-likelihoods under a model.
pub trait SequenceScorer {
    /// Vocabulary the scorer accepts.
    fn vocab(&self) -> usize;

    /// Per-position NLL of tokens `2..=T` given their prefixes.
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>>;

    /// `(mean, per-token)` next-token NLL.
    fn sequence_nll(&self, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {}", self.vocab())));
        }
        let per = self.token_nlls(tokens)?;
        let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
        Ok((mean, per))
    }
}

fn pick_nlls(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    let lp = log_softmax_rows(logits);
    let v = lp.dim(1);
    targets.iter().enumerate().map(|(r, &t)| -lp.data()[r * v + t]).collect()
}

impl SequenceScorer for Backbone {
    fn vocab(&self) -> usize {
        self.cfg.audio_vocab
    }

    /// Scores audio tokens against the full (text + audio) output head.
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let tape = Tape::no_grad();
        let x = self.embed_audio(&tape, &tokens[..tokens.len() - 1], false)?;
        let out = self.forward_hidden(&tape, x, true)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|t| t + self.cfg.text_vocab).collect();
        Ok(pick_nlls(&out.logits.expect("requested").value(), &targets))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenLmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TokenLmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            mlp_mult: 4,
            vocab: 256,
            max_seq: 64,
            lr: 3e-3,
            batch: 8,
            epochs: 3,
        }
    }
}

impl TokenLmConfig {
    fn shape(&self) -> TransformerShape {
        TransformerShape {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            mlp_mult: self.mlp_mult,
            max_seq: self.max_seq,
        }
    }
}

/// A fully trainable causal LM over codec tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLm {
    pub cfg: TokenLmConfig,
    pub params: ParamStore,
}

impl TokenLm {
    pub fn new(cfg: &TokenLmConfig, seed: u64) -> Result<Self> {
        cfg.shape().validate()?;
        if cfg.vocab < 2 {
            return Err(Error::Config("token LM vocabulary needs at least two ids".into()));
        }
        let mut rng = stream(seed, &[tag::LM, 2]);
        let mut params = ParamStore::new();
        params.insert("lm/embed", init_normal(&mut rng, &[cfg.vocab, cfg.hidden], 1.0));
        init_blocks(&mut params, "lm", &cfg.shape(), &mut rng);
        params.insert(
            "lm/head",
            init_normal(&mut rng, &[cfg.vocab, cfg.hidden], 1.0 / (cfg.hidden as f64).sqrt()),
        );
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new(json!({
            "format": "llm-codec-token-lm",
            "config": serde_json::to_value(&self.cfg)?,
            "config_hash": config_hash,
        }));
        for (n, t) in self.params.iter() {
            c.insert(n.clone(), t.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let cfg: TokenLmConfig = serde_json::from_value(
            c.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::format("config", "missing from token LM metadata"))?,
        )?;
        let mut lm = TokenLm::new(&cfg, 0)?;
        let names: Vec<String> = lm.params.names().cloned().collect();
        for n in names {
            lm.params.assign(&n, c.take(&n)?)?;
        }
        Ok(lm)
    }

    fn logits<'t>(&self, tape: &'t Tape, inputs: &[usize], trainable: bool) -> Result<Var<'t>> {
        let x = self.params.bind(tape, "lm/embed", trainable).index_select0(inputs);
        let out = run_blocks(&self.params, "lm", &self.cfg.shape(), tape, x, trainable)?;
        Ok(out.final_normed.matmul_t(self.params.bind(tape, "lm/head", trainable)))
    }
}

impl SequenceScorer for TokenLm {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Ok(Vec::new());
        }
        let tape = Tape::no_grad();
        let l = self.logits(&tape, &tokens[..tokens.len() - 1], false)?;
        Ok(pick_nlls(&l.value(), &tokens[1..]))
    }
}

/// Mean training loss before training (index 0) and during each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve(pub Vec<f64>);

/// Trains a fresh [`TokenLm`] by next-token cross-entropy for `epochs`
/// passes over `corpus` in seeded shuffled mini-batches.
pub fn train_token_lm(corpus: &[Vec<usize>], cfg: &TokenLmConfig, epochs: usize, seed: u64) -> Result<(TokenLm, LossCurve)> {
    let seqs: Vec<&[usize]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(cfg.max_seq + 1)])
        .collect();
    if seqs.is_empty() {
        return Err(Error::Config("token LM corpus has no sequence of two or more tokens".into()));
    }
    let mut lm = TokenLm::new(cfg, seed)?;
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.lr));
    let mut curve = vec![corpus_mean_nll(&lm, &seqs)?];
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut stream(seed, &[tag::ORDER, epoch as u64]));
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let n: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let mut loss: Option<Var<'_>> = None;
            for &i in batch {
                let s = seqs[i];
                let l = lm.logits(&tape, &s[..s.len() - 1], true)?;
                let ce = l.cross_entropy_weighted(&s[1..], &vec![1.0 / n as f64; s.len() - 1]);
                loss = Some(match loss {
                    Some(acc) => acc + ce,
                    None => ce,
                });
            }
            let loss = loss.expect("non-empty batch");
            total += loss.item() * n as f64;
            count += n;
            let mut grads = GradMap::new();
            grads.accumulate(&loss.backward(), 1.0);
            opt.step(&mut lm.params, &grads, 1.0);
        }
        curve.push(total / count as f64);
    }
    Ok((lm, LossCurve(curve)))
}

fn corpus_mean_nll(lm: &TokenLm, seqs: &[&[usize]]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in seqs {
        let per = lm.token_nlls(s)?;
        total += per.iter().sum::<f64>();
        count += per.len();
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 3,
            hidden: 16,
            heads: 2,
            text_vocab: 10,
            audio_vocab: 12,
            max_seq: 16,
            pretrain_steps: 5,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn deterministic_build_and_hidden_count() {
        let a = build_backbone(&small(), 3).unwrap();
        let b = build_backbone(&small(), 3).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        let tape = Tape::no_grad();
        let x = a.embed_audio(&tape, &[1, 2, 3], false).unwrap();
        let out = a.forward_hidden(&tape, x, true).unwrap();
        assert_eq!(out.hidden.len(), 3);
        assert_eq!(out.logits.unwrap().shape(), vec![3, 22]);
    }

    #[test]
    fn audio_rows_are_perturbed_copies_of_text_rows() {
        let b = build_backbone(&small(), 5).unwrap();
        let text = b.params.get(TEXT_EMBED);
        let audio = b.params.get(AUDIO_EMBED);
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut text_norms: Vec<f64> = (0..10).map(|i| norm(text.row(i))).collect();
        text_norms.sort_by(f64::total_cmp);
        let median = text_norms[5];
        for k in 0..12 {
            let a = audio.row(k);
            let closest = (0..10)
                .map(|i| a.iter().zip(text.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.05 * norm(a));
            assert!(norm(a) < 2.0 * median && norm(a) > 0.5 * median);
        }
    }

    #[test]
    fn pretraining_keeps_shapes_and_reduces_loss() {
        let mut b = build_backbone(&BackboneConfig { pretrain_steps: 40, ..small() }, 1).unwrap();
        let texts: Vec<Vec<usize>> = (0..20).map(|i| (0..8).map(|j| (i + j) % 10).collect()).collect();
        let curve = b.pretrain_on_text(&texts, 1).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
    }

    #[test]
    fn uniform_model_scores_log_vocab() {
        let mut lm = TokenLm::new(&TokenLmConfig { vocab: 256, hidden: 8, heads: 2, layers: 1, ..TokenLmConfig::default() }, 0).unwrap();
        lm.params.insert("lm/head", Tensor::zeros(&[256, 8]));
        let (mean, per) = lm.sequence_nll(&[3, 7, 9, 200]).unwrap();
        assert_eq!(per.len(), 3);
        assert!((mean - 256f64.ln()).abs() < 1e-12);
        assert!((mean - per.iter().sum::<f64>() / 3.0).abs() < 1e-9);
        assert!(matches!(lm.sequence_nll(&[1, 256]), Err(Error::Index(_))));
    }

    #[test]
    fn oracle_model_scores_near_zero() {
        // Silent blocks, one-hot embeddings and a head mapping token t to
        // t + 1 give a model that always predicts the true successor.
        let v = 6;
        let cfg = TokenLmConfig { vocab: v, hidden: 8, heads: 2, layers: 1, ..TokenLmConfig::default() };
        let mut lm = TokenLm::new(&cfg, 0).unwrap();
        for name in ["lm/l0/wo", "lm/l0/w2"] {
            let shape = lm.params.get(name).shape().to_vec();
            lm.params.insert(name, Tensor::zeros(&shape));
        }
        lm.params.insert("lm/embed", Tensor::from_fn(&[v, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }));
        lm.params.insert("lm/head", Tensor::from_fn(&[v, 8], |i| if i % 8 == (i / 8 + v - 1) % v { 50.0 } else { 0.0 }));
        let tokens: Vec<usize> = (0..20).map(|t| t % v).collect();
        let (mean, _) = lm.sequence_nll(&tokens).unwrap();
        assert!(mean < 1e-6, "{mean}");
    }

    #[test]
    fn single_token_corpus_reaches_unit_perplexity() {
        let cfg = TokenLmConfig { vocab: 16, hidden: 16, heads: 2, layers: 1, ..TokenLmConfig::default() };
        let corpus = vec![vec![5; 20]; 16];
        let (lm, _) = train_token_lm(&corpus, &cfg, 40, 1).unwrap();
        let (mean, _) = lm.sequence_nll(&corpus[0]).unwrap();
        assert!((mean.exp() - 1.0).abs() < 0.05, "ppl {}", mean.exp());
    }

    #[test]
    fn token_lm_learns_and_is_deterministic() {
        let cfg = TokenLmConfig {
            vocab: 8,
            hidden: 16,
            heads: 2,
            layers: 1,
            ..TokenLmConfig::default()
        };
        let corpus: Vec<Vec<usize>> = (0..24).map(|i| (0..10).map(|j| (i + 3 * j) % 8).collect()).collect();
        let (_, c1) = train_token_lm(&corpus, &cfg, 3, 9).unwrap();
        let (_, c2) = train_token_lm(&corpus, &cfg, 3, 9).unwrap();
        assert_eq!(c1, c2);
        assert!(c1.0[3] < c1.0[0]);
        assert!(matches!(train_token_lm(&[], &cfg, 1, 0), Err(Error::Config(_))));
    }
}
