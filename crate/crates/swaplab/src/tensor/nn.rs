//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::Tensor;
use crate::util::hash_named_tensors;

/// Index of a parameter inside a [`ParamStore`]. Stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
///
/// Registration order is construction order and is deterministic for a given model
/// config, which makes parameter hashes, checkpoints, and optimizer state all line
/// up without extra bookkeeping.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Stable hex digest over names + values in registration order.
    pub fn content_hash(&self) -> String {
        hash_named_tensors(
            self.names
                .iter()
                .map(|s| s.as_str())
                .zip(self.values.iter().map(|t| t.data.as_slice())),
        )
    }

    /// Copies values from `src` into parameters of `self` whose names share the
    /// given prefix mapping: `self` name = `dst_prefix` + suffix, `src` name =
    /// `src_prefix` + suffix. Shapes must match. Returns how many tensors copied.
    pub fn copy_prefixed(&mut self, dst_prefix: &str, src: &ParamStore, src_prefix: &str) -> usize {
        let mut copied = 0;
        for i in 0..self.values.len() {
            if let Some(suffix) = self.names[i].strip_prefix(dst_prefix) {
                if let Some(&j) = src.index.get(&format!("{src_prefix}{suffix}")) {
                    assert_eq!(
                        self.values[i].shape, src.values[j].shape,
                        "copy_prefixed shape mismatch at {}",
                        self.names[i]
                    );
                    self.values[i].data.copy_from_slice(&src.values[j].data);
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Kaiming-style uniform init: U(−√(3/fan_in)·gain, +√(3/fan_in)·gain).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn store_roundtrip_and_hash() {
        let mut s = ParamStore::new();
        let a = s.register("a.w", Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = s.register("b.w", Tensor::new(vec![1], vec![3.0]));
        assert_eq!(s.name(a), "a.w");
        assert_eq!(s.id_of("b.w"), Some(b));
        let h1 = s.content_hash();
        s.get_mut(b).data[0] = 4.0;
        assert_ne!(h1, s.content_hash());
    }

    #[test]
    fn prefixed_copy_matches_suffixes() {
        let mut src = ParamStore::new();
        src.register("enc.c1.w", Tensor::new(vec![2], vec![5.0, 6.0]));
        src.register("enc.c1.b", Tensor::new(vec![1], vec![7.0]));
        let mut dst = ParamStore::new();
        let w = dst.register("ref.c1.w", Tensor::zeros(&[2]));
        dst.register("ref.other", Tensor::zeros(&[1]));
        let n = dst.copy_prefixed("ref.", &src, "enc.");
        assert_eq!(n, 1);
        assert_eq!(dst.get(w).data, vec![5.0, 6.0]);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let t = kaiming_uniform(&[64, 32], 32, 1.0, &mut rng);
        let bound = (3.0f64 / 32.0).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
        // Deterministic for equal seeds.
        let mut rng2 = ChaCha12Rng::seed_from_u64(0);
        let t2 = kaiming_uniform(&[64, 32], 32, 1.0, &mut rng2);
        assert_eq!(t.data, t2.data);
    }
}
