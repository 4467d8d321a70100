//! Single-codebook vector quantizer with EMA updates.

use autodiff::{Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Codebook vectors plus their EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[V, C]`
    pub vectors: Tensor,
    /// `[V]`
    pub ema_counts: Vec<f64>,
    /// `[V, C]`
    pub ema_sums: Tensor,
    pub decay: f64,
}

impl Codebook {
    /// Wraps explicit vectors; statistics start at one count per entry.
    pub fn from_vectors(vectors: Tensor, decay: f64) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.dim(0) < 2 {
            return Err(Error::Shape(format!(
                "codebook needs at least two [C]-vectors, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite("codebook vectors".into()));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} must lie in [0, 1)")));
        }
        Ok(Self {
            ema_counts: vec![1.0; vectors.dim(0)],
            ema_sums: vectors.clone(),
            vectors,
            decay,
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    /// Nearest entry for every row of `z` (`[T, C]`); ties go to the lowest
    /// index.
    pub fn assign(&self, z: &Tensor) -> Vec<usize> {
        let c = self.dim();
        assert_eq!(z.dim(1), c, "latent width must match codebook");
        (0..z.dim(0))
            .map(|t| {
                let zr = z.row(t);
                let mut best = (0, f64::INFINITY);
                for k in 0..self.size() {
                    let d: f64 = zr.iter().zip(self.vectors.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Rows of the codebook selected by `tokens`, as `[T, C]`.
    pub fn lookup(&self, tokens: &[usize]) -> Tensor {
        let c = self.dim();
        let mut out = Vec::with_capacity(tokens.len() * c);
        for &k in tokens {
            out.extend_from_slice(self.vectors.row(k));
        }
        Tensor::new(&[tokens.len(), c], out)
    }

    /// EMA step: every count and sum decays; selected entries absorb their
    /// assigned latents and have their vectors recomputed. Entries not
    /// selected keep their vectors bit-for-bit.
    pub fn update_ema(&mut self, z: &Tensor, tokens: &[usize]) {
        let (v, c) = (self.size(), self.dim());
        let d = self.decay;
        let mut counts = vec![0.0; v];
        let mut sums = vec![0.0; v * c];
        for (t, &k) in tokens.iter().enumerate() {
            counts[k] += 1.0;
            for (s, x) in sums[k * c..(k + 1) * c].iter_mut().zip(z.row(t)) {
                *s += x;
            }
        }
        for k in 0..v {
            self.ema_counts[k] = d * self.ema_counts[k] + (1.0 - d) * counts[k];
            let row = self.ema_sums.row_mut(k);
            for (s, n) in row.iter_mut().zip(&sums[k * c..(k + 1) * c]) {
                *s = d * *s + (1.0 - d) * n;
            }
            if counts[k] > 0.0 {
                let cnt = self.ema_counts[k];
                let new: Vec<f64> = self.ema_sums.row(k).iter().map(|s| s / cnt).collect();
                self.vectors.row_mut(k).copy_from_slice(&new);
            }
        }
    }

    /// Entries whose EMA count fell below `threshold`.
    pub fn dead_entries(&self, threshold: f64) -> Vec<usize> {
        (0..self.size()).filter(|&k| self.ema_counts[k] < threshold).collect()
    }

    /// Replaces dead entries with randomly chosen rows of `pool` (`[N, C]`).
    /// Returns how many entries were reseeded.
    pub fn reseed_dead(&mut self, pool: &Tensor, threshold: f64, rng: &mut impl Rng) -> usize {
        let dead = self.dead_entries(threshold);
        if pool.dim(0) == 0 {
            return 0;
        }
        for &k in &dead {
            let src = pool.row(rng.gen_range(0..pool.dim(0))).to_vec();
            self.vectors.row_mut(k).copy_from_slice(&src);
            self.ema_sums.row_mut(k).copy_from_slice(&src);
            self.ema_counts[k] = 1.0;
        }
        dead.len()
    }

    pub fn all_finite(&self) -> bool {
        self.vectors.all_finite() && self.ema_sums.all_finite() && self.ema_counts.iter().all(|c| c.is_finite())
    }
}

/// Result of quantizing one latent sequence.
pub struct Quantized<'t> {
    pub tokens: Vec<usize>,
    /// Selected vectors in the forward pass; gradients flow straight to `z`.
    pub z_q: Var<'t>,
    /// Mean over frames of `||z - sg(q)||^2`.
    pub commit: Var<'t>,
}

/// Quantizes `z` (`[T, C]`). With `training` set the codebook's EMA
/// statistics absorb this batch.
pub fn quantize<'t>(z: Var<'t>, cb: &mut Codebook, training: bool) -> Result<Quantized<'t>> {
    let zv = z.value();
    if !zv.all_finite() {
        return Err(Error::NonFinite("latents entering the quantizer".into()));
    }
    if zv.ndim() != 2 || zv.dim(1) != cb.dim() {
        return Err(Error::Shape(format!(
            "latents {:?} do not match codebook width {}",
            zv.shape(),
            cb.dim()
        )));
    }
    let tokens = cb.assign(&zv);
    let q = cb.lookup(&tokens);
    let tape = z.tape();
    let frames = zv.dim(0) as f64;
    let diff = z - tape.constant(q.clone());
    let commit = diff.square().sum().scale(1.0 / frames);
    let z_q = z + tape.constant(q.zip_map(&zv, |a, b| a - b));
    if training {
        cb.update_ema(&zv, &tokens);
    }
    Ok(Quantized { tokens, z_q, commit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Tape;

    fn two_point() -> Codebook {
        Codebook::from_vectors(Tensor::new(&[2, 1], vec![0.0, 1.0]), 0.9).unwrap()
    }

    #[test]
    fn nearest_entry_and_commit() {
        let tape = Tape::new();
        let mut cb = two_point();
        let z = tape.leaf(Tensor::new(&[1, 1], vec![0.2]));
        let q = quantize(z, &mut cb, false).unwrap();
        assert_eq!(q.tokens, vec![0]);
        assert_eq!(q.z_q.value().data(), &[0.0]);
        assert!((q.commit.item() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn exact_match_has_zero_commit_and_ties_go_low() {
        let tape = Tape::new();
        let mut cb = two_point();
        let z = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 0.5]));
        let q = quantize(z, &mut cb, false).unwrap();
        assert_eq!(q.tokens, vec![1, 0]);
        let z1 = tape.leaf(Tensor::new(&[1, 1], vec![1.0]));
        assert_eq!(quantize(z1, &mut cb, false).unwrap().commit.item(), 0.0);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let tape = Tape::new();
        let mut cb = two_point();
        let z = tape.leaf(Tensor::new(&[1, 1], vec![0.2]));
        let q = quantize(z, &mut cb, false).unwrap();
        let g = q.z_q.scale(3.0).sum().backward();
        assert_eq!(g.get_or_zeros(z).data(), &[3.0]);
    }

    #[test]
    fn unselected_entries_keep_vectors() {
        let mut cb = Codebook::from_vectors(Tensor::new(&[3, 2], vec![0., 0., 1., 1., 5., 5.]), 0.5).unwrap();
        let before = cb.vectors.row(2).to_vec();
        let z = Tensor::new(&[2, 2], vec![0.1, 0.0, 0.9, 1.2]);
        let tokens = cb.assign(&z);
        cb.update_ema(&z, &tokens);
        assert_eq!(cb.vectors.row(2), before.as_slice());
        assert!(cb.ema_counts[2] < 1.0);
        assert_ne!(cb.vectors.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn dead_entries_get_reseeded() {
        let mut cb = Codebook::from_vectors(Tensor::new(&[2, 1], vec![0.0, 9.0]), 0.5).unwrap();
        let z = Tensor::new(&[1, 1], vec![0.1]);
        for _ in 0..20 {
            let t = cb.assign(&z);
            cb.update_ema(&z, &t);
        }
        assert_eq!(cb.dead_entries(1e-3), vec![1]);
        let pool = Tensor::new(&[1, 1], vec![0.7]);
        let n = cb.reseed_dead(&pool, 1e-3, &mut crate::rng::stream(0, &[]));
        assert_eq!(n, 1);
        assert_eq!(cb.vectors.row(1), &[0.7]);
    }

    #[test]
    fn non_finite_latents_are_rejected() {
        let tape = Tape::new();
        let mut cb = two_point();
        let z = tape.leaf(Tensor::new(&[1, 1], vec![f64::NAN]));
        assert!(matches!(quantize(z, &mut cb, true), Err(Error::NonFinite(_))));
    }
}
