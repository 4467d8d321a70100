//! Named parameter storage shared by every model in the pipeline.

use autodiff::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered map from parameter name to value. Names carry a namespace
/// prefix (`codec/`, `disc/`, `bridge/`, `ftp/`, `backbone/`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Binds `name` on the tape: trainable params become named leaves,
    /// everything else a constant.
    pub fn bind<'t>(&self, tape: &'t Tape, name: &str, trainable: bool) -> Var<'t> {
        let v = self.get(name);
        if trainable {
            tape.param(name, v)
        } else {
            tape.constant(v.clone())
        }
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Replaces values in place, checking that names and shapes agree.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of every entry
    /// whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn hash(&self) -> String {
        self.hash_prefix("")
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform init in `±gain / sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Gaussian init with standard deviation `std`.
pub fn init_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_values_and_prefixes() {
        let mut p = ParamStore::new();
        p.insert("a/w", Tensor::ones(&[2]));
        p.insert("b/w", Tensor::zeros(&[3]));
        let h_a = p.hash_prefix("a/");
        let h_all = p.hash();
        p.get_mut("b/w").unwrap().data_mut()[0] = 1.0;
        assert_eq!(p.hash_prefix("a/"), h_a);
        assert_ne!(p.hash(), h_all);
    }

    #[test]
    fn assign_rejects_shape_change() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::ones(&[2]));
        assert!(matches!(p.assign("w", Tensor::ones(&[3])), Err(Error::Shape(_))));
        assert!(matches!(p.assign("v", Tensor::ones(&[2])), Err(Error::Index(_))));
    }
}
