//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::name_hash;
use crate::scalar::Real;
use crate::tensor::{seeded_init, Init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameter groups; freeze contracts and learning rates are per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Projector,
    Decoder,
    Depth,
    Seg,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Backbone,
        Group::Projector,
        Group::Decoder,
        Group::Depth,
        Group::Seg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Projector => "projector",
            Group::Decoder => "decoder",
            Group::Depth => "depth",
            Group::Seg => "seg",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
}

/// Ordered collection of named tensors. Insertion order is the
/// checkpoint order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    /// Registers a parameter initialized from the store seed and its name.
    pub fn init(&mut self, name: &str, group: Group, dims: &[usize], scheme: Init) -> ParamId {
        let seed = self.seed ^ name_hash(name);
        let tensor = seeded_init(dims, scheme, seed).expect("parameter dims are non-empty");
        self.insert(name, group, tensor)
            .expect("parameter names are unique")
    }

    /// Like [`ParamStore::init`] with uniform-fan-in, scaled by `gain`.
    pub fn init_scaled(&mut self, name: &str, group: Group, dims: &[usize], gain: f64) -> ParamId {
        let id = self.init(name, group, dims, Init::UniformFanIn);
        let g = T::of(gain);
        for x in self.params[id.0].tensor.data_mut() {
            *x *= g;
        }
        id
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            seed: self.seed,
        }
    }

    /// Replaces every tensor from `(name, tensor)` pairs. Shapes are all
    /// checked before anything is written, so a failed load leaves the
    /// store untouched.
    pub fn assign_all(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        let mut plan = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}` in checkpoint")))?;
            let expected = self.params[id.0].tensor.dims();
            if expected != t.dims() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: t.dims().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            plan.push(id);
        }
        for (id, (_, t)) in plan.into_iter().zip(tensors) {
            self.params[id.0].tensor = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, dims and the bit patterns of every tensor, optionally restricted to one group.
    pub fn digest(&self, group: Option<Group>) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
