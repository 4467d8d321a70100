//! Multi-period and multi-scale waveform discriminators, hinge and
//! feature-matching losses, R1 and the feature-matching pause gate.

use autodiff::{Conv1dSpec, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamStore};
use crate::rng::{stream, tag};

pub const PERIODS: [usize; 5] = [2, 3, 5, 7, 11];
pub const SCALES: [usize; 3] = [1, 2, 4];
const SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub periods: Vec<usize>,
    pub scales: Vec<usize>,
    /// Hidden widths of each sub-discriminator's two strided layers.
    pub channels: [usize; 2],
    pub r1_gamma: f64,
    /// Optimizer steps between R1 updates.
    pub r1_every: u64,
    /// Step used by the R1 directional difference.
    pub r1_step: f64,
    pub fm_weight_start: f64,
    pub fm_weight_end: f64,
    pub gate_threshold: f64,
    pub gate_pause: u64,
    pub generator_weight: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            periods: PERIODS.to_vec(),
            scales: SCALES.to_vec(),
            channels: [8, 16],
            r1_gamma: 2.0,
            r1_every: 16,
            r1_step: 1e-3,
            fm_weight_start: 1.5,
            fm_weight_end: 1.0,
            gate_threshold: 0.99,
            gate_pause: 500,
            generator_weight: 1.0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods != PERIODS {
            return Err(Error::Config(format!("discriminator periods must be {PERIODS:?}")));
        }
        if self.scales != SCALES {
            return Err(Error::Config(format!("discriminator scales must be {SCALES:?}")));
        }
        if self.r1_every == 0 || self.gate_pause == 0 {
            return Err(Error::Config("R1 cadence and gate pause must be positive".into()));
        }
        if self.fm_weight_end.partial_cmp(&self.fm_weight_start).is_none_or(|o| o.is_gt()) {
            return Err(Error::Config("feature-matching weight must decay".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubKind {
    Period(usize),
    Scale(usize),
}

/// Scores and intermediate feature maps of one sub-discriminator.
pub struct DiscOutput<'t> {
    pub kind: SubKind,
    pub score: Var<'t>,
    pub features: Vec<Var<'t>>,
}

/// All sub-discriminator parameters under `disc/`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBank {
    pub cfg: AdversarialConfig,
    pub params: ParamStore,
}

struct Layer {
    kernel: usize,
    stride: usize,
}

const MPD_LAYERS: [Layer; 3] = [
    Layer { kernel: 5, stride: 3 },
    Layer { kernel: 5, stride: 3 },
    Layer { kernel: 3, stride: 1 },
];
const MSD_LAYERS: [Layer; 3] = [
    Layer { kernel: 9, stride: 4 },
    Layer { kernel: 9, stride: 4 },
    Layer { kernel: 3, stride: 1 },
];

fn layer_spec(l: &Layer) -> Conv1dSpec {
    Conv1dSpec::new(l.stride, (l.kernel - 1) / 2, l.kernel / 2)
}

fn sub_name(kind: SubKind) -> String {
    match kind {
        SubKind::Period(p) => format!("disc/mpd{p}"),
        SubKind::Scale(s) => format!("disc/msd{s}"),
    }
}

/// `[N]` signal as a `[p, 1, floor(N/p)]` batch: column `j` holds samples
/// `j, j+p, j+2p, ...`. Trailing samples past the last full row are dropped.
pub fn period_view(x: Var<'_>, p: usize) -> Var<'_> {
    let n = x.shape()[0];
    let rows = n / p;
    let x = if rows * p == n { x } else { x.narrow(0, 0, rows * p) };
    x.reshape(&[rows, p]).t().reshape(&[p, 1, rows])
}

impl DiscriminatorBank {
    pub fn new(cfg: AdversarialConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[tag::INIT, 1]);
        let mut params = ParamStore::new();
        let kinds = Self::kinds(&cfg);
        let widths = [1, cfg.channels[0], cfg.channels[1], 1];
        for kind in kinds {
            let layers = match kind {
                SubKind::Period(_) => &MPD_LAYERS,
                SubKind::Scale(_) => &MSD_LAYERS,
            };
            for (i, l) in layers.iter().enumerate() {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let name = format!("{}/l{i}", sub_name(kind));
                params.insert(
                    format!("{name}/w"),
                    init_uniform(&mut rng, &[cout, cin, l.kernel], cin * l.kernel, 3f64.sqrt()),
                );
                params.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
            }
        }
        Ok(Self { cfg, params })
    }

    fn kinds(cfg: &AdversarialConfig) -> Vec<SubKind> {
        cfg.periods
            .iter()
            .map(|&p| SubKind::Period(p))
            .chain(cfg.scales.iter().map(|&s| SubKind::Scale(s)))
            .collect()
    }

    pub fn min_len(&self) -> usize {
        2 * self.cfg.periods.iter().max().copied().unwrap_or(1)
    }

    /// Runs every sub-discriminator on `x` (`[N]`). Parameters bind as
    /// trainable when `trainable` is set.
    pub fn discriminate<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Vec<DiscOutput<'t>>> {
        let n = x.shape()[0];
        if x.shape().len() != 1 || n < self.min_len() {
            return Err(Error::Shape(format!(
                "discriminator input must be 1-D with at least {} samples, got {:?}",
                self.min_len(),
                x.shape()
            )));
        }
        let mut out = Vec::new();
        for kind in Self::kinds(&self.cfg) {
            let (mut h, layers) = match kind {
                SubKind::Period(p) => (period_view(x, p), &MPD_LAYERS),
                SubKind::Scale(s) => {
                    let h = x.reshape(&[1, 1, n]);
                    (if s > 1 { h.avg_pool_last(s, s) } else { h }, &MSD_LAYERS)
                }
            };
            let mut features = Vec::new();
            for (i, l) in layers.iter().enumerate() {
                let name = format!("{}/l{i}", sub_name(kind));
                let w = self.params.bind(tape, &format!("{name}/w"), trainable);
                let b = self.params.bind(tape, &format!("{name}/b"), trainable);
                h = h.conv1d(w, layer_spec(l)).add_channel_bias(b);
                if i + 1 < layers.len() {
                    h = h.leaky_relu(SLOPE);
                    features.push(h);
                }
            }
            let len = h.value().numel();
            out.push(DiscOutput {
                kind,
                score: h.reshape(&[len]),
                features,
            });
        }
        Ok(out)
    }
}

/// Discriminator, generator and feature-matching losses.
pub struct GanLosses<'t> {
    pub d_loss: Var<'t>,
    pub g_loss: Var<'t>,
    pub fm_loss: Var<'t>,
}

/// Hinge losses averaged over sub-discriminators, plus `fm_weight` times
/// the mean l1 between detached real features and fake features.
pub fn gan_losses<'t>(real: &[DiscOutput<'t>], fake: &[DiscOutput<'t>], fm_weight: f64) -> Result<GanLosses<'t>> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "real and fake bundles differ: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let subs = real.len() as f64;
    let mut d = Vec::new();
    let mut g = Vec::new();
    let mut fm = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        if r.kind != f.kind || r.features.len() != f.features.len() {
            return Err(Error::Shape(format!("bundle structure mismatch at {:?}", r.kind)));
        }
        d.push((r.score.neg().add_scalar(1.0)).relu().mean() + f.score.add_scalar(1.0).relu().mean());
        g.push(f.score.mean().neg());
        for (rf, ff) in r.features.iter().zip(&f.features) {
            if rf.shape() != ff.shape() {
                return Err(Error::Shape(format!("feature shape mismatch at {:?}", r.kind)));
            }
            fm.push((rf.detach() - *ff).abs().mean());
        }
    }
    let mean = |v: Vec<Var<'t>>, n: f64| v.into_iter().reduce(|a, b| a + b).unwrap().scale(1.0 / n);
    let layers = fm.len() as f64;
    Ok(GanLosses {
        d_loss: mean(d, subs),
        g_loss: mean(g, subs),
        fm_loss: mean(fm, layers).scale(fm_weight),
    })
}

/// `(gamma / 2) * ||d(sum of scores)/dx||^2` for any scoring function,
/// together with the input gradient.
pub fn r1_penalty_of<F>(score: F, x: &Tensor, gamma: f64) -> (f64, Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let s = score(&tape, xv).sum();
    let g = s.backward().get_or_zeros(xv);
    (0.5 * gamma * g.sq_norm(), g)
}

/// R1 of the whole bank at a real waveform.
pub fn r1_penalty(bank: &DiscriminatorBank, real: &[f64]) -> Result<(f64, Tensor)> {
    if real.len() < bank.min_len() {
        return Err(Error::Shape("R1 input too short".into()));
    }
    let x = Tensor::new(&[real.len()], real.to_vec());
    Ok(r1_penalty_of(
        |tape, xv| {
            let outs = bank.discriminate(tape, xv, false).expect("length checked");
            outs.into_iter().map(|o| o.score.sum()).reduce(|a, b| a + b).unwrap()
        },
        &x,
        bank.cfg.r1_gamma,
    ))
}

/// A loss whose parameter gradient matches that of the R1 penalty:
/// `gamma * |u| * (S(x + h v) - S(x - h v)) / (2 h)` with `u` the input
/// gradient at `x` and `v = u / |u|`. Avoids differentiating through a
/// gradient.
pub fn r1_surrogate<'t>(bank: &DiscriminatorBank, tape: &'t Tape, real: &[f64], input_grad: &Tensor) -> Result<Var<'t>> {
    let norm = input_grad.sq_norm().sqrt();
    if norm == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let h = bank.cfg.r1_step;
    let shifted = |sign: f64| {
        let s: Vec<f64> = real
            .iter()
            .zip(input_grad.data())
            .map(|(x, u)| x + sign * h * u / norm)
            .collect();
        tape.constant(Tensor::new(&[s.len()], s))
    };
    let total = |x: Var<'t>| -> Result<Var<'t>> {
        Ok(bank
            .discriminate(tape, x, true)?
            .into_iter()
            .map(|o| o.score.sum())
            .reduce(|a, b| a + b)
            .unwrap())
    };
    let diff = total(shifted(1.0))? - total(shifted(-1.0))?;
    Ok(diff.scale(bank.cfg.r1_gamma * norm / (2.0 * h)))
}

/// Pause state of the generator-side GAN terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanGateState {
    pub paused_until: Option<u64>,
    pub fm_weight: f64,
}

impl Default for GanGateState {
    fn default() -> Self {
        Self {
            paused_until: None,
            fm_weight: 1.5,
        }
    }
}

impl GanGateState {
    pub fn is_paused(&self, step: u64) -> bool {
        self.paused_until.is_some_and(|u| step < u)
    }
}

/// Starts a pause of `pause` steps when feature matching dominates the
/// total loss (strictly above `threshold`) and no pause is running.
pub fn gan_gate(state: GanGateState, fm_loss: f64, total_loss: f64, step: u64, threshold: f64, pause: u64) -> GanGateState {
    let mut next = state;
    if next.paused_until.is_some_and(|u| step >= u) {
        next.paused_until = None;
    }
    if next.paused_until.is_none() && total_loss > 0.0 && fm_loss / total_loss > threshold {
        next.paused_until = Some(step + pause);
    }
    next
}

/// Linear decay of the feature-matching weight from `start` at `from` to
/// `end` at `to`.
pub fn fm_weight_at(step: u64, from: u64, to: u64, start: f64, end: f64) -> f64 {
    if step <= from || to <= from {
        return if step <= from { start } else { end };
    }
    let frac = ((step - from) as f64 / (to - from) as f64).min(1.0);
    start + (end - start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> DiscriminatorBank {
        DiscriminatorBank::new(AdversarialConfig::default(), 3).unwrap()
    }

    fn signal(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect()
    }

    #[test]
    fn eight_bundles_deterministic() {
        let b = bank();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(&[400], signal(400)));
        let a = b.discriminate(&tape, x, false).unwrap();
        let c = b.discriminate(&tape, x, false).unwrap();
        assert_eq!(a.len(), 8);
        for (p, q) in a.iter().zip(&c) {
            assert_eq!(*p.score.value(), *q.score.value());
            assert_eq!(p.features.len(), 2);
        }
    }

    #[test]
    fn period_view_matches_naive_reshape() {
        let tape = Tape::no_grad();
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let v = period_view(tape.constant(Tensor::new(&[64], x.clone())), 11);
        assert_eq!(v.shape(), vec![11, 1, 5]);
        let got = v.value();
        for j in 0..11 {
            for r in 0..5 {
                assert_eq!(got.data()[j * 5 + r], x[r * 11 + j]);
            }
        }
        assert!(bank().discriminate(&tape, tape.constant(Tensor::zeros(&[64])), false).is_ok());
        assert!(bank().discriminate(&tape, tape.constant(Tensor::zeros(&[21])), false).is_err());
    }

    fn outputs<'t>(tape: &'t Tape, scores: &[f64]) -> Vec<DiscOutput<'t>> {
        vec![DiscOutput {
            kind: SubKind::Scale(1),
            score: tape.constant(Tensor::new(&[scores.len()], scores.to_vec())),
            features: vec![tape.constant(Tensor::new(&[2], vec![0.5, -0.5]))],
        }]
    }

    #[test]
    fn hinge_reference_values() {
        let tape = Tape::no_grad();
        let l = gan_losses(&outputs(&tape, &[1.0, 1.0]), &outputs(&tape, &[-1.0, -1.0]), 1.0).unwrap();
        assert_eq!(l.d_loss.item(), 0.0);
        assert_eq!(l.fm_loss.item(), 0.0);
        let l = gan_losses(&outputs(&tape, &[0.0, 0.0]), &outputs(&tape, &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(l.d_loss.item(), 2.0);
        assert_eq!(l.g_loss.item(), 0.0);
    }

    #[test]
    fn r1_of_linear_and_constant_discriminators() {
        let a = Tensor::new(&[3], vec![1.0, -2.0, 0.5]);
        let a2 = a.clone();
        let (p, _) = r1_penalty_of(move |t, x| x.mul_const(&a2).sum() + t.scalar(0.0), &Tensor::new(&[3], vec![4.0, 1.0, 2.0]), 2.0);
        assert!((p - a.sq_norm()).abs() < 1e-12);
        let (p, _) = r1_penalty_of(|t, _| t.scalar(3.0), &Tensor::ones(&[3]), 2.0);
        assert_eq!(p, 0.0);
        let (p, _) = r1_penalty(&bank(), &signal(200)).unwrap();
        assert!(p >= 0.0 && p.is_finite());
    }

    #[test]
    fn gate_pauses_for_exactly_the_window() {
        let s = GanGateState::default();
        let t = gan_gate(s, 0.995, 1.0, 100, 0.99, 500);
        assert_eq!(t.paused_until, Some(600));
        assert!(t.is_paused(599) && !t.is_paused(600));
        assert_eq!(gan_gate(s, 0.5, 1.0, 100, 0.99, 500), s);
        assert_eq!(gan_gate(s, 0.99, 1.0, 100, 0.99, 500), s);
        assert_eq!(gan_gate(t, 0.995, 1.0, 300, 0.99, 500).paused_until, Some(600));
        assert_eq!(gan_gate(t, 0.995, 1.0, 600, 0.99, 500).paused_until, Some(1100));
    }

    #[test]
    fn fm_weight_ramp_stays_in_bounds() {
        for step in 0..3000 {
            let w = fm_weight_at(step, 1000, 2500, 1.5, 1.0);
            assert!((1.0..=1.5).contains(&w));
        }
        assert_eq!(fm_weight_at(1000, 1000, 2500, 1.5, 1.0), 1.5);
        assert_eq!(fm_weight_at(2500, 1000, 2500, 1.5, 1.0), 1.0);
        assert!((fm_weight_at(1750, 1000, 2500, 1.5, 1.0) - 1.25).abs() < 1e-12);
    }
}
