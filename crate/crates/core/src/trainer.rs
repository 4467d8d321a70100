//! The staggered training loop: reconstruction, adversarial and LLM-side
//! objectives, split optimizers, stability guards and checkpoints.

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::{fm_weight_at, gan_gate, gan_losses, r1_penalty, r1_surrogate, DiscriminatorBank, GanGateState};
use crate::align::{contrastive_loss, cosine_align, pool_last, select_layers, summary_vector, MemoryBank};
use crate::audio::{segment, Utterance};
use crate::backbone::{build_backbone, Backbone, AUDIO_EMBED};
use crate::bridge::{apply_code_noise, bridge_ce, bridge_forward, lm_branch_augment, temperature, LOGIT_CLAMP};
use crate::checkpoint::Container;
use crate::codec::{quantize, Codec};
use crate::config::{Objectives, RunConfig};
use crate::error::{Error, Result};
use crate::ftp::{init_heads, FtpHeads};
use crate::guards::{ensure_no_batch_statistics, AUDIO_CLIP};
use crate::optim::{clip_global_norm, GradMap, Optimizer};
use crate::params::{hex_digest, ParamStore};
use crate::recon::recon_loss;
use crate::rng::{stream, tag};
use crate::schedule::{lr_scale_at, schedule_at, term_weights, total_loss, LossBreakdown, ScheduleState, TermWeights};
use crate::spectral::Spectral;

pub const BRIDGE_WEIGHT: &str = "bridge/w";
const GENERATOR_GROUPS: [&str; 4] = ["codec/", "bridge/", AUDIO_EMBED, "ftp/"];
const AUX_GROUPS: [&str; 3] = ["bridge/", AUDIO_EMBED, "ftp/"];
const PRETRAIN_KEY: u64 = 1 << 40;

/// One fixed-length training window with its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub samples: Vec<f64>,
    pub valid_len: usize,
    pub transcript: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub items: Vec<TrainItem>,
}

impl TrainData {
    /// The first segment of each utterance.
    pub fn new(utts: &[Utterance], cfg: &RunConfig) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Config("no training utterances".into()));
        }
        let items = utts
            .iter()
            .map(|u| {
                let seg = segment(&u.audio, cfg.train.segment_seconds).swap_remove(0);
                TrainItem {
                    samples: seg.audio.into_samples(),
                    valid_len: seg.valid_len,
                    transcript: u.transcript.clone(),
                }
            })
            .collect();
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn transcripts(&self) -> Vec<Vec<usize>> {
        self.items.iter().map(|i| i.transcript.clone()).collect()
    }
}

/// Frozen-backbone summaries of a transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTarget {
    /// Pooled state of every aligned layer.
    pub layers: Vec<Tensor>,
    pub summary: Vec<f64>,
}

/// All parameterized components.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub codec: Codec,
    pub disc: DiscriminatorBank,
    pub backbone: Backbone,
    pub bridge: ParamStore,
    pub heads: FtpHeads,
}

/// What happened during one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub phase: u8,
    pub losses: LossBreakdown,
    pub d_loss: f64,
    pub r1: Option<f64>,
    pub lambda_ftp: f64,
    pub lambda_cos: f64,
    pub lambda_ctr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub disc_grad_norm: f64,
    pub skipped: bool,
    pub events: Vec<String>,
}

struct LmBranch<'t> {
    final_normed: Var<'t>,
    hidden: Vec<Var<'t>>,
    targets: Vec<usize>,
}

struct MicroOut {
    parts: LossBreakdown,
    d_loss: f64,
    r1: Option<f64>,
    grads: GradMap,
    latents: Tensor,
    push: Option<Vec<f64>>,
    finite: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub seed: u64,
    pub models: Models,
    pub opt_codec: Optimizer,
    pub opt_aux: Optimizer,
    pub opt_disc: Optimizer,
    pub bank: MemoryBank,
    pub gate: GanGateState,
    pub step: u64,
    spectral: Spectral,
    sa_layers: RangeInclusive<usize>,
    text: Vec<TextTarget>,
}

fn bridge_from_codebook(codec: &Codec) -> Tensor {
    codec.codebook.vectors.t()
}

fn text_targets(backbone: &Backbone, layers: &RangeInclusive<usize>, data: &TrainData) -> Result<Vec<TextTarget>> {
    data.items
        .iter()
        .map(|it| {
            let tape = Tape::no_grad();
            let x = backbone.embed_text(&tape, &it.transcript)?;
            let out = backbone.forward_hidden(&tape, x, false)?;
            let pooled = layers
                .clone()
                .map(|l| pool_last(out.hidden[l - 1], it.transcript.len()))
                .collect::<Result<Vec<_>>>()?;
            let summary = summary_vector(&pooled).value().data().to_vec();
            Ok(TextTarget {
                layers: pooled.iter().map(|v| (*v.value()).clone()).collect(),
                summary,
            })
        })
        .collect()
}

fn add<'t>(slot: &mut f64, v: Var<'t>, weight: f64, terms: &mut Vec<Var<'t>>) {
    *slot = v.item();
    if weight != 0.0 {
        terms.push(v.scale(weight));
    }
}

fn sum_vars<'t>(vars: impl IntoIterator<Item = Var<'t>>) -> Option<Var<'t>> {
    vars.into_iter().reduce(|a, b| a + b)
}

impl Trainer {
    /// Builds every model for `seed`; the backbone is briefly pretrained on
    /// the transcripts of `data` before it is frozen.
    pub fn new(cfg: RunConfig, seed: u64, data: &TrainData) -> Result<Self> {
        cfg.validate()?;
        let codec = Codec::new(cfg.codec.clone(), seed)?;
        ensure_no_batch_statistics(&codec)?;
        let disc = DiscriminatorBank::new(cfg.adversarial.clone(), seed)?;
        let mut backbone = build_backbone(&cfg.backbone, seed)?;
        backbone.pretrain_on_text(&data.transcripts(), seed)?;
        let mut bridge = ParamStore::new();
        bridge.insert(BRIDGE_WEIGHT, bridge_from_codebook(&codec));
        let heads = init_heads(backbone.lm_head(), &backbone.audio_ids(), cfg.ftp.horizons, cfg.backbone.hidden)?;
        let sa_layers = select_layers(cfg.backbone.layers)?;
        let text = text_targets(&backbone, &sa_layers, data)?;
        let spectral = Spectral::new(cfg.spectral.clone(), cfg.codec.sample_rate)?;
        Ok(Self {
            opt_codec: Optimizer::new(cfg.optim.codec),
            opt_aux: Optimizer::new(cfg.optim.aux),
            opt_disc: Optimizer::new(cfg.optim.disc),
            bank: MemoryBank::new(cfg.sa.bank_capacity),
            gate: GanGateState {
                paused_until: None,
                fm_weight: cfg.adversarial.fm_weight_start,
            },
            step: 0,
            models: Models {
                codec,
                disc,
                backbone,
                bridge,
                heads,
            },
            spectral,
            sa_layers,
            text,
            seed,
            cfg,
        })
    }

    pub fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    /// Switches the LLM-side objectives, e.g. when forking a run.
    pub fn set_objectives(&mut self, o: Objectives) {
        self.cfg.train.objectives = o;
    }

    /// Replaces the prediction heads with `k` fresh copies of the output head.
    pub fn reset_heads(&mut self, k: usize) -> Result<()> {
        let b = &self.models.backbone;
        self.models.heads = init_heads(b.lm_head(), &b.audio_ids(), k, self.cfg.backbone.hidden)?;
        self.cfg.ftp.horizons = k;
        let stale: Vec<String> = self.opt_aux.first.keys().filter(|n| n.starts_with("ftp/")).cloned().collect();
        for n in stale {
            self.opt_aux.first.shift_remove(&n);
            self.opt_aux.second.shift_remove(&n);
        }
        Ok(())
    }

    /// Hash of every parameter that training may change.
    pub fn trainable_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let m = &self.models;
        let mut h = Sha256::new();
        for part in [
            m.codec.params.hash(),
            m.disc.params.hash(),
            m.backbone.params.hash_prefix(AUDIO_EMBED),
            m.bridge.hash(),
            m.heads.params.hash(),
        ] {
            h.update(part.as_bytes());
        }
        for v in m.codec.codebook.vectors.data() {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }

    pub fn frozen_hash(&self) -> String {
        self.models.backbone.frozen_hash()
    }

    fn batch_indices(&self, n: usize, step: u64, key: u64) -> Vec<usize> {
        let mut rng = stream(self.seed, &[tag::ORDER, key, step]);
        (0..self.cfg.train.micro_batches).map(|_| rng.gen_range(0..n)).collect()
    }

    /// Reconstruction-only warm start of the codec with its own optimizer,
    /// run for the configured number of steps. The bridge is re-derived
    /// from the resulting codebook.
    pub fn pretrain_codec(&mut self, data: &TrainData) -> Result<Vec<f64>> {
        let mut opt = Optimizer::new(self.cfg.train.codec_pretrain);
        let mut curve = Vec::new();
        let m = self.cfg.train.micro_batches as f64;
        for step in 0..self.cfg.train.codec_pretrain_steps {
            let mut grads = GradMap::new();
            let mut pool = Vec::new();
            let mut total = 0.0;
            for idx in self.batch_indices(data.len(), step, PRETRAIN_KEY) {
                let it = &data.items[idx];
                let tape = Tape::new();
                let codec = &mut self.models.codec;
                let x = tape.constant(Tensor::new(&[it.samples.len()], it.samples.clone()));
                let z = codec.encode_with(&tape, x, true)?;
                pool.push((*z.value()).clone());
                let q = quantize(z, &mut codec.codebook, true)?;
                let x_hat = codec.decode_with(&tape, q.z_q, true).clamp(-AUDIO_CLIP, AUDIO_CLIP);
                let r = recon_loss(&self.spectral, x, x_hat)?;
                let w = self.cfg.schedule.recon;
                let loss = r.mel.scale(w.mel)
                    + r.ms_mel.scale(w.ms_mel)
                    + r.mr_stft.scale(w.mr_stft)
                    + r.cstft.scale(w.cstft)
                    + q.commit.scale(self.cfg.schedule.commitment_weight);
                total += loss.item() / m;
                grads.accumulate(&loss.backward(), 1.0 / m);
            }
            if !total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!("codec pretraining diverged at step {step}")));
            }
            clip_global_norm(&mut grads, self.cfg.schedule.grad_clip);
            opt.step(&mut self.models.codec.params, &grads, 1.0);
            self.reseed(&pool, step | PRETRAIN_KEY);
            curve.push(total);
        }
        self.models.bridge.insert(BRIDGE_WEIGHT, bridge_from_codebook(&self.models.codec));
        Ok(curve)
    }

    fn reseed(&mut self, pool: &[Tensor], key: u64) -> usize {
        if pool.is_empty() {
            return 0;
        }
        let c = pool[0].dim(1);
        let rows: Vec<f64> = pool.iter().flat_map(|t| t.data().iter().copied()).collect();
        let pool = Tensor::new(&[rows.len() / c, c], rows);
        let mut rng = stream(self.seed, &[tag::RESEED, key]);
        self.models
            .codec
            .codebook
            .reseed_dead(&pool, self.cfg.codec.dead_code_threshold, &mut rng)
    }

    fn tau(&self, step: u64) -> f64 {
        let full_scale = (step as f64 / self.cfg.schedule.scale).round() as u64;
        temperature(full_scale, &self.cfg.bridge)
    }

    fn schedule_state(&self, step: u64) -> Result<ScheduleState> {
        let mut s = schedule_at(step, &self.cfg.schedule)?;
        s.gan_gate = self.gate;
        let b = self.cfg.schedule.boundaries();
        s.gan_gate.fm_weight = fm_weight_at(
            step,
            b.d_only_until,
            b.total,
            self.cfg.adversarial.fm_weight_start,
            self.cfg.adversarial.fm_weight_end,
        );
        Ok(s)
    }

    /// One optimizer step over seeded micro-batches.
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepReport> {
        let idx = self.batch_indices(data.len(), self.step, 0);
        self.train_step_on(data, &idx)
    }

    /// One optimizer step over the given item indices.
    pub fn train_step_on(&mut self, data: &TrainData, indices: &[usize]) -> Result<StepReport> {
        if data.len() != self.text.len() {
            return Err(Error::Contract("training data differs from the data the trainer was built with".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Index(format!("batch index {bad} outside {} items", data.len())));
        }
        let step = self.step;
        let mut state = self.schedule_state(step)?;
        let gan = self.cfg.train.gan;
        let gan_gen = gan && state.codec_opt_active && !state.gan_gate.is_paused(step);
        let obj = self.cfg.train.objectives;
        if !obj.bridge {
            state.lambdas.bridge = 0.0;
        }
        if !obj.ftp {
            state.lambdas.ftp = 0.0;
        }
        if !obj.sa {
            state.lambdas.cos = 0.0;
            state.lambdas.ctr = 0.0;
        }
        let weights = term_weights(&state, &self.cfg.schedule, gan_gen);
        let paused = gan && state.gan_gate.is_paused(step);
        let r1_due = gan && !paused && step.is_multiple_of(self.cfg.adversarial.r1_every);
        let codebook_snapshot = self.models.codec.codebook.clone();
        let m = indices.len() as f64;

        let mut grads = GradMap::new();
        let mut parts = LossBreakdown::default();
        let mut d_loss = 0.0;
        let mut r1 = None;
        let mut pool = Vec::new();
        let mut pushes = Vec::new();
        let mut finite = true;
        for (mi, &idx) in indices.iter().enumerate() {
            let out = match self.micro_step(data, idx, mi as u64, &state, &weights, gan_gen, r1_due && mi == 0) {
                Ok(out) => out,
                Err(Error::NonFinite(what)) => {
                    log::warn!("step {step}: non-finite {what}");
                    finite = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !out.finite {
                finite = false;
                break;
            }
            for (acc, v) in [
                (&mut parts.mel, out.parts.mel),
                (&mut parts.ms_mel, out.parts.ms_mel),
                (&mut parts.mr_stft, out.parts.mr_stft),
                (&mut parts.cstft, out.parts.cstft),
                (&mut parts.commit, out.parts.commit),
                (&mut parts.gen, out.parts.gen),
                (&mut parts.fm, out.parts.fm),
                (&mut parts.bridge, out.parts.bridge),
                (&mut parts.ftp, out.parts.ftp),
                (&mut parts.cos, out.parts.cos),
                (&mut parts.ctr, out.parts.ctr),
            ] {
                *acc += v / m;
            }
            d_loss += out.d_loss / m;
            r1 = r1.or(out.r1);
            grads.merge(out.grads);
            pool.push(out.latents);
            pushes.extend(out.push);
        }
        let mut events = Vec::new();
        if paused {
            events.push("gan-paused: generator terms and discriminator step skipped".into());
        }
        let total = if finite {
            total_loss(&parts, &state, &self.cfg.schedule, gan_gen).ok().map(|(t, b)| {
                parts = b;
                t
            })
        } else {
            None
        };
        let grads_ok = grads.all_finite() && d_loss.is_finite();
        let mut report = StepReport {
            step,
            phase: state.phase,
            losses: parts,
            d_loss,
            r1,
            lambda_ftp: state.lambdas.ftp,
            lambda_cos: state.lambdas.cos,
            lambda_ctr: state.lambdas.ctr,
            tau: self.tau(step),
            grad_norm: 0.0,
            disc_grad_norm: 0.0,
            skipped: false,
            events: Vec::new(),
        };
        let Some(total) = total.filter(|_| grads_ok) else {
            self.models.codec.codebook = codebook_snapshot;
            log::warn!("step {step}: non-finite loss, update skipped");
            report.skipped = true;
            report.losses.total = f64::NAN;
            report.events.push("skip: non-finite loss".into());
            self.step += 1;
            return Ok(report);
        };

        let clip = self.cfg.schedule.grad_clip;
        let mut gen_grads = grads.select(&GENERATOR_GROUPS);
        let mut disc_grads = grads.select(&["disc/"]);
        let (gn, gf) = clip_global_norm(&mut gen_grads, clip);
        let (dn, df) = clip_global_norm(&mut disc_grads, clip);
        if gf < 1.0 || df < 1.0 {
            events.push(format!("clip: generator x{gf:.4}, discriminator x{df:.4}"));
        }
        let lr = lr_scale_at(step, &self.cfg.schedule);
        if state.codec_opt_active {
            let g = gen_grads.select(&["codec/"]);
            if !g.is_empty() {
                self.opt_codec.step(&mut self.models.codec.params, &g, lr);
            }
        }
        let aux = gen_grads.select(&AUX_GROUPS);
        if !aux.is_empty() {
            let m = &mut self.models;
            self.opt_aux
                .step_stores(&mut [&mut m.bridge, &mut m.backbone.params, &mut m.heads.params], &aux, lr);
        }
        if !disc_grads.is_empty() {
            self.opt_disc.step(&mut self.models.disc.params, &disc_grads, lr);
        }
        let reseeded = self.reseed(&pool, step);
        if reseeded > 0 {
            events.push(format!("reseed: {reseeded} codebook entries"));
        }
        for v in pushes {
            self.bank.push(&v)?;
        }
        if gan_gen {
            let before = self.gate.paused_until;
            let pause = ((self.cfg.adversarial.gate_pause as f64 * self.cfg.schedule.scale).round() as u64).max(1);
            let fm = weights.fm * parts.fm;
            self.gate = gan_gate(state.gan_gate, fm, total, step, self.cfg.adversarial.gate_threshold, pause);
            if let Some(until) = self.gate.paused_until.filter(|_| self.gate.paused_until != before) {
                events.push(format!("gan-pause until {until}"));
            }
        }
        self.gate.fm_weight = state.gan_gate.fm_weight;
        report.grad_norm = gn;
        report.disc_grad_norm = dn;
        report.events = events;
        self.step += 1;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn micro_step(
        &mut self,
        data: &TrainData,
        idx: usize,
        micro: u64,
        state: &ScheduleState,
        w: &TermWeights,
        gan_gen: bool,
        r1_due: bool,
    ) -> Result<MicroOut> {
        let item = &data.items[idx];
        let step = state.step;
        let codec_on = state.codec_opt_active;
        let obj = self.cfg.train.objectives;
        let hop = self.cfg.codec.hop();
        let tape = Tape::new();
        let n = item.samples.len();
        let x = tape.constant(Tensor::new(&[n], item.samples.clone()));
        let models = &mut self.models;
        let z = models.codec.encode_with(&tape, x, codec_on)?;
        let latents = (*z.value()).clone();
        let frames = latents.dim(0);
        let valid = item.valid_len.div_ceil(hop).clamp(1, frames);
        let q = quantize(z, &mut models.codec.codebook, true)?;
        let x_hat = models.codec.decode_with(&tape, q.z_q, codec_on).clamp(-AUDIO_CLIP, AUDIO_CLIP);
        let models = &self.models;

        let mut parts = LossBreakdown::default();
        let mut terms = Vec::new();
        if codec_on {
            let r = recon_loss(&self.spectral, x, x_hat)?;
            add(&mut parts.mel, r.mel, w.mel, &mut terms);
            add(&mut parts.ms_mel, r.ms_mel, w.ms_mel, &mut terms);
            add(&mut parts.mr_stft, r.mr_stft, w.mr_stft, &mut terms);
            add(&mut parts.cstft, r.cstft, w.cstft, &mut terms);
            add(&mut parts.commit, q.commit, w.commit, &mut terms);
        } else {
            parts.commit = q.commit.item();
        }

        let mut d_terms = Vec::new();
        let mut r1 = None;
        if self.cfg.train.gan && !state.gan_gate.is_paused(step) {
            let disc = &models.disc;
            let real = disc.discriminate(&tape, x, true)?;
            let fake_d = disc.discriminate(&tape, x_hat.detach(), true)?;
            d_terms.push(gan_losses(&real, &fake_d, 1.0)?.d_loss);
            if gan_gen {
                let fake_g = disc.discriminate(&tape, x_hat, false)?;
                let g = gan_losses(&real, &fake_g, 1.0)?;
                add(&mut parts.gen, g.g_loss, w.gen, &mut terms);
                add(&mut parts.fm, g.fm_loss, w.fm, &mut terms);
            }
            if r1_due {
                let (pen, u) = r1_penalty(disc, &item.samples)?;
                r1 = Some(pen);
                d_terms.push(r1_surrogate(disc, &tape, &item.samples, &u)?);
            }
        }

        let w_bridge = models.bridge.bind(&tape, BRIDGE_WEIGHT, obj.bridge || obj.lm_branch());
        if obj.bridge {
            let zv = z.narrow(0, 0, valid);
            let logits = zv.matmul(w_bridge).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            add(&mut parts.bridge, bridge_ce(logits, &q.tokens[..valid])?, w.bridge, &mut terms);
        }
        let want_ftp = obj.ftp && w.ftp > 0.0 && valid > models.heads.horizons();
        let want_sa = obj.sa && (w.cos > 0.0 || w.ctr > 0.0);
        let mut push = None;
        if want_ftp || want_sa {
            let b = self.lm_branch(&tape, &item.samples, &q.tokens[..valid], step, micro, codec_on, w_bridge, false)?;
            let models = &self.models;
            if want_ftp {
                let l = models.heads.loss(&tape, b.final_normed, &b.targets, true)?;
                add(&mut parts.ftp, l, w.ftp, &mut terms);
            }
            if want_sa {
                let text = &self.text[idx];
                let pooled = self
                    .sa_layers
                    .clone()
                    .map(|l| pool_last(b.hidden[l - 1], valid))
                    .collect::<Result<Vec<_>>>()?;
                add(&mut parts.cos, cosine_align(&tape, &pooled, &text.layers)?, w.cos, &mut terms);
                let av = summary_vector(&pooled);
                let sa = &self.cfg.sa;
                let ctr = contrastive_loss(&tape, av, &text.summary, &self.bank, sa.logit_scale, sa.label_smoothing)?;
                add(&mut parts.ctr, ctr, w.ctr, &mut terms);
                push = Some(text.summary.clone());
            }
        }

        let d_loss = sum_vars(d_terms.iter().copied());
        let d_value = d_terms.first().map_or(0.0, |v| v.item());
        let loss = sum_vars(terms.into_iter().chain(d_loss));
        let finite = parts.terms().iter().all(|v| v.is_finite()) && d_value.is_finite();
        let mut grads = GradMap::new();
        if finite {
            if let Some(loss) = loss {
                if loss.item().is_finite() {
                    grads.accumulate(&loss.backward(), 1.0 / self.cfg.train.micro_batches as f64);
                }
            }
        }
        Ok(MicroOut {
            parts,
            d_loss: d_value,
            r1,
            grads,
            latents,
            push,
            finite,
        })
    }

    /// Jittered re-encoding, Gumbel bridge and frozen backbone over the
    /// first `tokens.len()` frames of `samples`.
    #[allow(clippy::too_many_arguments)]
    fn lm_branch<'t>(
        &self,
        tape: &'t Tape,
        samples: &[f64],
        tokens: &[usize],
        step: u64,
        micro: u64,
        codec_on: bool,
        w_bridge: Var<'t>,
        relaxed: bool,
    ) -> Result<LmBranch<'t>> {
        let models = &self.models;
        let valid = tokens.len();
        let vocab = self.cfg.codec.codebook_size;
        let mut rng = stream(self.seed, &[tag::STEP, step, micro, 0]);
        let aug = lm_branch_augment(samples, tokens, vocab, &self.cfg.bridge, &mut rng);
        let xj = tape.constant(Tensor::new(&[samples.len()], aug.jittered));
        let zj = models.codec.encode_with(tape, xj, codec_on)?.narrow(0, 0, valid);
        let targets = models.codec.codebook.assign(&zj.value());
        let e_audio = models.backbone.audio_embed_var(tape, true);
        let mut grng = stream(self.seed, &[tag::STEP, step, micro, 1]);
        let out = bridge_forward(zj, w_bridge, e_audio, self.tau(step), Some(&mut grng))?;
        let y = apply_code_noise(if relaxed { out.soft } else { out.one_hot }, &aug.replaced);
        let bb = models.backbone.forward_hidden(tape, y.matmul(e_audio), false)?;
        Ok(LmBranch {
            final_normed: bb.final_normed,
            hidden: bb.hidden,
            targets,
        })
    }

    /// Unweighted future-token loss of `samples` through the trainable
    /// encoder, and its gradients. Everything stochastic is drawn from the
    /// streams of `step`, so repeated calls are deterministic.
    ///
    /// With `relaxed` set the backbone sees the soft Gumbel-Softmax sample
    /// instead of the straight-through one-hot, which makes the loss smooth
    /// in the encoder weights and so checkable by finite differences.
    pub fn ftp_probe(&self, samples: &[f64], step: u64, relaxed: bool) -> Result<(f64, GradMap)> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[samples.len()], samples.to_vec()));
        let z = self.models.codec.encode_with(&tape, x, true)?;
        let tokens = self.models.codec.codebook.assign(&z.value());
        if tokens.len() <= self.models.heads.horizons() {
            return Err(Error::Shape(format!("{} frames are too few for the prediction heads", tokens.len())));
        }
        let w_bridge = self.models.bridge.bind(&tape, BRIDGE_WEIGHT, true);
        let b = self.lm_branch(&tape, samples, &tokens, step, 0, true, w_bridge, relaxed)?;
        let loss = self.models.heads.loss(&tape, b.final_normed, &b.targets, true)?;
        let mut grads = GradMap::new();
        grads.accumulate(&loss.backward(), 1.0);
        Ok((loss.item(), grads))
    }

    /// Runs steps until `until` (exclusive), writing one JSON line per
    /// logged step to `log`.
    pub fn run_until(&mut self, data: &TrainData, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < until {
            let r = self.train_step(data)?;
            let every = self.cfg.train.log_every.max(1);
            if r.step % every == 0 || r.skipped || !r.events.is_empty() {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", serde_json::to_string(&r)?)?;
                }
            }
            if r.step % every == 0 {
                log::info!(
                    "step {} phase {} total {:.4} ftp {:.4} cos {:.4}",
                    r.step,
                    r.phase,
                    r.losses.total,
                    r.losses.ftp,
                    r.losses.cos
                );
            }
            reports.push(r);
        }
        Ok(reports)
    }

    /// Serializes every piece of state that influences later steps.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "format": "llm-codec-trainer",
            "step": self.step,
            "seed": self.seed,
            "config_hash": self.config_hash(),
            "config": serde_json::to_value(&self.cfg)?,
            "gate": serde_json::to_value(self.gate)?,
            "optimizer_steps": [self.opt_codec.steps, self.opt_aux.steps, self.opt_disc.steps],
            "rng": "per-step streams derived from seed and step",
        });
        let mut c = Container::new(meta);
        let m = &self.models;
        for store in [&m.codec.params, &m.disc.params, &m.backbone.params, &m.bridge, &m.heads.params] {
            for (n, t) in store.iter() {
                c.insert(format!("param/{n}"), t.clone());
            }
        }
        let cb = &m.codec.codebook;
        c.insert("codebook/vectors", cb.vectors.clone());
        c.insert("codebook/counts", Tensor::new(&[cb.ema_counts.len()], cb.ema_counts.clone()));
        c.insert("codebook/sums", cb.ema_sums.clone());
        for (prefix, opt) in [("opt/codec", &self.opt_codec), ("opt/aux", &self.opt_aux), ("opt/disc", &self.opt_disc)] {
            for (n, t) in opt.state(prefix) {
                c.insert(n, t);
            }
        }
        let h = self.cfg.backbone.hidden;
        let bank: Vec<f64> = self.bank.entries().flat_map(|e| e.iter().copied()).collect();
        c.insert("bank", Tensor::new(&[bank.len() / h, h], bank));
        c.save(path)
    }

    /// Restores a trainer written by [`Trainer::save`] for the same data.
    pub fn load(path: &Path, data: &TrainData) -> Result<Self> {
        let mut c = Container::load(path)?;
        let meta = c.metadata.clone();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::format(k, "missing from checkpoint metadata"));
        let cfg: RunConfig = serde_json::from_value(field("config")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let gate: GanGateState = serde_json::from_value(field("gate")?)?;
        let opt_steps: [u64; 3] = serde_json::from_value(field("optimizer_steps")?)?;
        let hash: String = serde_json::from_value(field("config_hash")?)?;
        if hash != cfg.hash() {
            return Err(Error::Integrity {
                entry: "metadata".into(),
                detail: "config hash does not match the stored config".into(),
            });
        }
        cfg.validate()?;
        let codec = Codec::new(cfg.codec.clone(), seed)?;
        let disc = DiscriminatorBank::new(cfg.adversarial.clone(), seed)?;
        let backbone = build_backbone(&cfg.backbone, seed)?;
        let heads = init_heads(backbone.lm_head(), &backbone.audio_ids(), cfg.ftp.horizons, cfg.backbone.hidden)?;
        let mut bridge = ParamStore::new();
        bridge.insert(BRIDGE_WEIGHT, Tensor::zeros(&[cfg.codec.latent_dim, cfg.codec.codebook_size]));
        let mut models = Models {
            codec,
            disc,
            backbone,
            bridge,
            heads,
        };
        for store in [
            &mut models.codec.params,
            &mut models.disc.params,
            &mut models.backbone.params,
            &mut models.bridge,
            &mut models.heads.params,
        ] {
            let names: Vec<String> = store.names().cloned().collect();
            for n in names {
                store.assign(&n, c.take(&format!("param/{n}"))?)?;
            }
        }
        let cb = &mut models.codec.codebook;
        cb.vectors = c.take("codebook/vectors")?;
        cb.ema_counts = c.take("codebook/counts")?.data().to_vec();
        cb.ema_sums = c.take("codebook/sums")?;
        let mut opts = [
            Optimizer::new(cfg.optim.codec),
            Optimizer::new(cfg.optim.aux),
            Optimizer::new(cfg.optim.disc),
        ];
        for ((prefix, opt), steps) in ["opt/codec", "opt/aux", "opt/disc"].iter().zip(&mut opts).zip(opt_steps) {
            opt.load_state(prefix, &c.entries, steps);
        }
        let stored = c.take("bank")?;
        let bank = MemoryBank::from_raw(cfg.sa.bank_capacity, (0..stored.dim(0)).map(|i| stored.row(i).to_vec()).collect())?;
        let sa_layers = select_layers(cfg.backbone.layers)?;
        let text = text_targets(&models.backbone, &sa_layers, data)?;
        let spectral = Spectral::new(cfg.spectral.clone(), cfg.codec.sample_rate)?;
        let [opt_codec, opt_aux, opt_disc] = opts;
        Ok(Self {
            cfg,
            seed,
            models,
            opt_codec,
            opt_aux,
            opt_disc,
            bank,
            gate,
            step,
            spectral,
            sa_layers,
            text,
        })
    }
}
