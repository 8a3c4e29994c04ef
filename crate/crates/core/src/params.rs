//! Named parameters, non-trainable buffers, and gradient maps.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Convolution kernels, BN affine terms, projections.
    Weight,
    /// Architecture logits (ω per mixed edge, α/β per layer).
    Arch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Arc<Tensor<T>>,
}

/// A running statistic or other state that is saved but never optimized.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Owns every parameter and buffer of a network.
///
/// Parameter values are shared with live graphs through `Arc`, so building a
/// graph never copies weights; an optimizer step copies-on-write only if a
/// graph still holds the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    by_name: HashMap<String, ParamId>,
    buffer_by_name: HashMap<String, BufferId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            buffer_by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name) && !self.buffer_by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            tensor: Arc::new(tensor),
        });
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name) && !self.buffer_by_name.contains_key(&name),
            "duplicate buffer name {name:?}"
        );
        let id = BufferId(self.buffers.len());
        self.buffer_by_name.insert(name.clone(), id);
        self.buffers.push(Buffer { name, tensor });
        id
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].tensor)
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        assert_eq!(
            tensor.shape(),
            self.value(id).shape(),
            "set: shape mismatch for {}",
            self.params[id.0].name
        );
        self.params[id.0].tensor = Arc::new(tensor);
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn lookup_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_by_name.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer<T>)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufferId(i), b))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar elements in a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Digest of every value in `group`, in registration order.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            bytes.clear();
            hasher.update(p.name.as_bytes());
            for &x in p.tensor.data() {
                x.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Copies every parameter and buffer whose name also exists in `src`
    /// with the same shape. Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, src: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(sid) = src.lookup(&p.name) {
                let s = &src.params[sid.0].tensor;
                if s.shape() == p.tensor.shape() {
                    p.tensor = Arc::clone(s);
                    copied += 1;
                }
            }
        }
        for b in &mut self.buffers {
            if let Some(sid) = src.lookup_buffer(&b.name) {
                let s = &src.buffers[sid.0].tensor;
                if s.shape() == b.tensor.shape() {
                    b.tensor = s.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Converts every value to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: Arc::new(p.tensor.cast()),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            buffer_by_name: self.buffer_by_name.clone(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradientMap<T> {
    pub(crate) grads: BTreeMap<String, (ParamId, Tensor<T>)>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn new() -> Self {
        GradientMap { grads: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(n, (id, g))| (n.as_str(), *id, g))
    }

    /// Sums another map into this one.
    pub fn accumulate(&mut self, other: GradientMap<T>) {
        for (name, (id, g)) in other.grads {
            match self.grads.get_mut(&name) {
                Some((_, acc)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.grads.insert(name, (id, g));
                }
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|(_, g)| g.data())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all entries so the total norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            let s = T::c(max_norm / norm);
            for (_, g) in self.grads.values_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    /// Clears every entry (the caller-side "zero grad").
    pub fn zero(&mut self) {
        self.grads.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", ParamGroup::Weight, Tensor::zeros(&[1]));
        s.add("a", ParamGroup::Arch, Tensor::zeros(&[1]));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", ParamGroup::Weight, Tensor::zeros(&[2]));
        let mut m = GradientMap::<f64>::new();
        m.grads.insert("a".into(), (a, Tensor::from_f64(&[2], &[3.0, 4.0])));
        assert_eq!(m.clip_norm(10.0), 5.0);
        assert_eq!(m.get("a").unwrap().data(), &[3.0, 4.0]);
        m.clip_norm(1.0);
        assert!((m.norm() - 1.0).abs() < 1e-12);
        assert!((m.get("a").unwrap().data()[0] - 0.6f64).abs() < 1e-12);
    }

    #[test]
    fn checksum_tracks_one_group() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", ParamGroup::Weight, Tensor::zeros(&[2]));
        let a = s.add("a", ParamGroup::Arch, Tensor::zeros(&[2]));
        let arch = s.checksum(ParamGroup::Arch);
        let weight = s.checksum(ParamGroup::Weight);
        s.value_mut(w).data_mut()[0] = 1.0;
        assert_eq!(arch, s.checksum(ParamGroup::Arch));
        assert_ne!(weight, s.checksum(ParamGroup::Weight));
        s.value_mut(a).data_mut()[1] = 1.0;
        assert_ne!(arch, s.checksum(ParamGroup::Arch));
    }
}
