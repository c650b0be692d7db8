//! Named parameter trees and their seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Ordered map from dotted parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Structure(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    /// Subset whose names satisfy `pred`.
    pub fn filter(&self, mut pred: impl FnMut(&str) -> bool) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| pred(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Errors unless both trees carry the same names with the same shapes.
    pub fn check_isomorphic(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Structure(format!(
                "parameter trees differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::Structure(format!("parameter names differ: `{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Structure(format!(
                    "parameter `{ka}` shapes differ: {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over names, shapes and raw values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        let mut buf = Vec::new();
        for (k, v) in &self.tensors {
            h.write(k.as_bytes());
            for &d in v.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    /// Registers every parameter as a tape leaf. Names for which `trainable`
    /// returns false are recorded as constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t, T: Element> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Binds already-registered variables under the given names.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every trainable parameter, zero-filled where nothing flowed.
    pub fn grads(&self, grads: &crate::tensor::Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Stable 64-bit hash of a string.
pub fn name_hash(s: &str) -> u64 {
    let mut h = Fnv::new();
    h.write(s.as_bytes());
    h.finish()
}

/// Derives a sub-seed from a base seed and a sequence of integers.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = Fnv::new();
    h.write(&seed.to_le_bytes());
    for p in parts {
        h.write(&p.to_le_bytes());
    }
    h.finish()
}

/// Initialization schemes. Every parameter draws from its own stream keyed
/// by `(seed, name)`, so adding or removing components never shifts the
/// values of the others.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated to two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

pub fn init_tensor<T: Element>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * std {
                    break T::from_f64(v);
                }
            })
        }
        Init::Uniform(bound) => Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound))),
    }
}

/// Adds `name` to `store`, initialized with `init`.
pub fn add_param<T: Element>(store: &mut ParamStore<T>, seed: u64, name: &str, shape: &[usize], init: Init) {
    store.insert(name, init_tensor(seed, name, shape, init));
}
