//! Strided convolutional encoder/decoder around a single EMA codebook.

mod quantizer;

pub use quantizer::{quantize, Codebook, Quantized};

use autodiff::{Conv1dSpec, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::params::{init_normal, init_uniform, ParamStore};
use crate::rng::{stream, tag};

/// Discrete codec token ids.
pub type TokenSequence = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub latent_dim: usize,
    /// Per-stage downsampling factors; their product is the hop.
    pub strides: Vec<usize>,
    /// Channel width after each downsampling stage.
    pub channels: Vec<usize>,
    /// Width of the first (full-rate) convolution.
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub commitment_weight: f64,
    pub dead_code_threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            latent_dim: 32,
            strides: vec![4, 8, 10],
            channels: vec![16, 32, 64],
            stem_channels: 8,
            stem_kernel: 7,
            codebook_size: 256,
            ema_decay: 0.99,
            commitment_weight: 0.25,
            dead_code_threshold: 1e-3,
        }
    }
}

impl CodecConfig {
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.channels.len() {
            return Err(Error::Config("codec needs one channel width per stride".into()));
        }
        if self.strides.iter().chain(&self.channels).any(|&v| v == 0) || self.latent_dim == 0 {
            return Err(Error::Config("codec widths and strides must be positive".into()));
        }
        if self.stem_kernel.is_multiple_of(2) || self.stem_channels == 0 {
            return Err(Error::Config("stem kernel must be odd and stem width positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least two entries".into()));
        }
        if !(self.sample_rate as usize).is_multiple_of(self.hop()) {
            return Err(Error::Config(format!(
                "hop {} does not divide the sample rate {}",
                self.hop(),
                self.sample_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Framewise continuous latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `[T, C]`
    pub frames: Tensor,
    pub frame_rate: f64,
}

/// Encoder and decoder parameters plus the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
}

fn stride_spec(s: usize) -> Conv1dSpec {
    Conv1dSpec::new(s, s / 2, s - s / 2)
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[tag::INIT, 0]);
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, transposed: bool| {
            let shape = if transposed { [cin, cout, k] } else { [cout, cin, k] };
            p.insert(format!("{name}/w"), init_uniform(&mut rng, &shape, cin * k, 3f64.sqrt()));
            p.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
        };
        let (sc, sk) = (cfg.stem_channels, cfg.stem_kernel);
        conv(&mut p, "codec/enc/stem", sc, 1, sk, false);
        let mut cin = sc;
        for (i, (&s, &c)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            conv(&mut p, &format!("codec/enc/down{i}"), c, cin, 2 * s, false);
            cin = c;
        }
        conv(&mut p, "codec/enc/out", cfg.latent_dim, cin, 3, false);
        conv(&mut p, "codec/dec/in", cin, cfg.latent_dim, 3, false);
        for i in (0..cfg.strides.len()).rev() {
            let cout = if i == 0 { sc } else { cfg.channels[i - 1] };
            conv(&mut p, &format!("codec/dec/up{i}"), cout, cfg.channels[i], 2 * cfg.strides[i], true);
        }
        conv(&mut p, "codec/dec/out", 1, sc, sk, false);
        let vectors = init_normal(&mut rng, &[cfg.codebook_size, cfg.latent_dim], 0.5);
        let codebook = Codebook::from_vectors(vectors, cfg.ema_decay)?;
        Ok(Self {
            cfg,
            params: p,
            codebook,
        })
    }

    /// The codec has no batch-statistics layers; every parameter is a
    /// convolution weight or bias.
    pub fn has_batch_statistics(&self) -> bool {
        self.params
            .names()
            .any(|n| !(n.ends_with("/w") || n.ends_with("/b")) || n.contains("norm"))
    }

    fn conv<'t>(&self, tape: &'t Tape, x: Var<'t>, name: &str, spec: Conv1dSpec, trainable: bool) -> Var<'t> {
        let w = self.params.bind(tape, &format!("{name}/w"), trainable);
        let b = self.params.bind(tape, &format!("{name}/b"), trainable);
        x.conv1d(w, spec).add_channel_bias(b)
    }

    /// `[N]` samples to `[T, C]` latents with `T = floor(N / hop)`.
    pub fn encode<'t>(&self, tape: &'t Tape, samples: Var<'t>) -> Result<Var<'t>> {
        self.encode_with(tape, samples, true)
    }

    /// [`Codec::encode`] with parameters bound as constants unless `trainable`.
    pub fn encode_with<'t>(&self, tape: &'t Tape, samples: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let hop = self.cfg.hop();
        let n = samples.value().numel();
        if n < hop {
            return Err(Error::Shape(format!("waveform of {n} samples is shorter than one hop ({hop})")));
        }
        let t = n / hop;
        let x = if t * hop == n { samples } else { samples.narrow(0, 0, t * hop) };
        let mut h = x.reshape(&[1, 1, t * hop]);
        h = self.conv(tape, h, "codec/enc/stem", Conv1dSpec::same(self.cfg.stem_kernel), trainable).silu();
        for (i, &s) in self.cfg.strides.iter().enumerate() {
            h = self.conv(tape, h, &format!("codec/enc/down{i}"), stride_spec(s), trainable).silu();
        }
        h = self.conv(tape, h, "codec/enc/out", Conv1dSpec::same(3), trainable);
        Ok(h.reshape(&[self.cfg.latent_dim, t]).t())
    }

    /// `[T, C]` latents to `[T * hop]` samples.
    pub fn decode<'t>(&self, tape: &'t Tape, z_q: Var<'t>) -> Var<'t> {
        self.decode_with(tape, z_q, true)
    }

    pub fn decode_with<'t>(&self, tape: &'t Tape, z_q: Var<'t>, trainable: bool) -> Var<'t> {
        let t = z_q.shape()[0];
        let mut h = z_q.t().reshape(&[1, self.cfg.latent_dim, t]);
        h = self.conv(tape, h, "codec/dec/in", Conv1dSpec::same(3), trainable).silu();
        for i in (0..self.cfg.strides.len()).rev() {
            let name = format!("codec/dec/up{i}");
            let w = self.params.bind(tape, &format!("{name}/w"), trainable);
            let b = self.params.bind(tape, &format!("{name}/b"), trainable);
            h = h.conv_transpose1d(w, stride_spec(self.cfg.strides[i])).add_channel_bias(b).silu();
        }
        h = self.conv(tape, h, "codec/dec/out", Conv1dSpec::same(self.cfg.stem_kernel), trainable);
        h.reshape(&[t * self.cfg.hop()])
    }

    /// Inference-only latents.
    pub fn latents(&self, w: &Waveform) -> Result<LatentSequence> {
        let tape = Tape::no_grad();
        let z = self.encode(&tape, tape.constant(Tensor::new(&[w.len()], w.samples().to_vec())))?;
        Ok(LatentSequence {
            frames: (*z.value()).clone(),
            frame_rate: self.cfg.frame_rate(),
        })
    }

    pub fn tokenize(&self, w: &Waveform) -> Result<TokenSequence> {
        Ok(self.codebook.assign(&self.latents(w)?.frames))
    }

    /// Decodes codebook entries for `tokens`.
    pub fn detokenize(&self, tokens: &[usize]) -> Result<Waveform> {
        if let Some(&bad) = tokens.iter().find(|&&k| k >= self.codebook.size()) {
            return Err(Error::Index(format!("token {bad} outside codebook of {}", self.codebook.size())));
        }
        let tape = Tape::no_grad();
        let y = self.decode(&tape, tape.constant(self.codebook.lookup(tokens)));
        let s = y.value().data().iter().map(|v| v.clamp(-1.2, 1.2)).collect();
        Waveform::new(s, self.cfg.sample_rate)
    }

    /// encode, quantize, decode without touching the codebook statistics.
    pub fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        self.detokenize(&self.tokenize(w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> Codec {
        Codec::new(CodecConfig::default(), 1).unwrap()
    }

    #[test]
    fn frame_counts_follow_hop() {
        let c = codec();
        assert_eq!(c.cfg.hop(), 320);
        assert_eq!(c.cfg.frame_rate(), 50.0);
        let w = Waveform::new(vec![0.01; 64_000], 16_000).unwrap();
        assert_eq!(c.latents(&w).unwrap().frames.shape(), &[200, 32]);
        let w = Waveform::new(vec![0.01; 320], 16_000).unwrap();
        assert_eq!(c.latents(&w).unwrap().frames.dim(0), 1);
        let w = Waveform::new(vec![0.01; 319], 16_000).unwrap();
        assert!(matches!(c.latents(&w), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_stays_finite_and_round_trip_keeps_length() {
        let c = codec();
        let w = Waveform::silence(6400, 16_000).unwrap();
        assert!(c.latents(&w).unwrap().frames.all_finite());
        let r = c.reconstruct(&w).unwrap();
        assert_eq!(r.len(), 6400);
        let tape = Tape::no_grad();
        let y = c.decode(&tape, tape.constant(Tensor::zeros(&[200, 32])));
        assert_eq!(y.value().numel(), 64_000);
        assert!(y.value().all_finite());
    }

    #[test]
    fn no_batch_statistics_layers() {
        assert!(!codec().has_batch_statistics());
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(codec().params.hash(), codec().params.hash());
        assert_ne!(codec().params.hash(), Codec::new(CodecConfig::default(), 2).unwrap().params.hash());
    }
}
