//! Named parameter tensors with deterministic ordering and seeded init.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};

/// All learnable tensors of a model, keyed by a dotted path such as
/// `exg.time_conv.0.w`. A `BTreeMap` keeps iteration order — and therefore
/// serialization, optimizer traversal, and checksum order — deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let previous = self.tensors.insert(name.clone(), value);
        debug_assert!(previous.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Copies every tensor under an additional dotted prefix, e.g. merging
    /// an encoder's parameters into a whole-model set as `eeg.<name>`.
    pub fn merged_under(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in &self.tensors {
            out.insert(format!("{prefix}.{name}"), value.clone());
        }
        out
    }

    /// Extracts the sub-set under `prefix.`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let dotted = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, value) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&dotted) {
                out.insert(rest, value.clone());
            }
        }
        out
    }

    /// Registers every tensor as a gradient-carrying leaf on `tape`.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    /// True when both sets hold bit-identical tensors under the same names.
    pub fn bit_identical(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(other.tensors.iter()).all(
                |((ka, va), (kb, vb))| {
                    ka == kb
                        && va.shape() == vb.shape()
                        && va
                            .iter()
                            .zip(vb.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                },
            )
    }
}

impl FromIterator<(String, ArrayD<f64>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<f64>)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Uniform init in `±1/√fan_in`, the usual scheme for conv and linear maps.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

pub fn init_zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn prefix_round_trip() {
        let mut p = ParamSet::new();
        p.insert("conv.w", init_ones(&[2, 2]));
        p.insert("conv.b", init_zeros(&[2]));
        let merged = p.merged_under("exg");
        assert!(merged.get("exg.conv.w").is_some());
        let back = merged.strip_prefix("exg");
        assert!(back.bit_identical(&p));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let x = init_uniform(&[3, 3], 3, &mut a);
        let y = init_uniform(&[3, 3], 3, &mut b);
        assert_eq!(x, y);
        let bound = 1.0 / 3.0_f64.sqrt();
        assert!(x.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn bit_identity_detects_single_ulp_changes() {
        let mut p = ParamSet::new();
        p.insert("w", init_ones(&[2]));
        let mut q = p.clone();
        assert!(p.bit_identical(&q));
        q.get_mut("w").unwrap()[[0]] = 1.0 + f64::EPSILON;
        assert!(!p.bit_identical(&q));
    }
}
