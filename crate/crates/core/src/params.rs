//! Named parameter storage with per-group freezing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter groups. Freezing and checkpoint sections work per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Autoencoder,
    /// Frozen Stable-Diffusion-style denoiser (encoder, middle, decoder, time embedding).
    Sd,
    /// Trainable clone of the SD encoder and middle blocks.
    Sg,
    /// Conv-SiLU hint encoder.
    Hint,
    /// Spatial-aware feature fusion convolutions.
    Sff,
    /// Zero-initialized projections grafting SG outputs onto SD.
    Connection,
    /// Class embedding of the LDM-style baseline.
    ClassEmbed,
    /// Non-trainable running statistics (batch norm).
    Buffer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Autoencoder,
        ParamGroup::Sd,
        ParamGroup::Sg,
        ParamGroup::Hint,
        ParamGroup::Sff,
        ParamGroup::Connection,
        ParamGroup::ClassEmbed,
        ParamGroup::Buffer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Autoencoder => "autoencoder",
            ParamGroup::Sd => "sd",
            ParamGroup::Sg => "sg",
            ParamGroup::Hint => "hint",
            ParamGroup::Sff => "sff",
            ParamGroup::Connection => "connection",
            ParamGroup::ClassEmbed => "class_embed",
            ParamGroup::Buffer => "buffer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    /// Groups trained in the SG phase.
    pub fn is_sg_side(self) -> bool {
        matches!(
            self,
            ParamGroup::Sg | ParamGroup::Hint | ParamGroup::Sff | ParamGroup::Connection
        )
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub frozen: bool,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, group: ParamGroup, value: Tensor<F>) -> ParamId {
        let frozen = group == ParamGroup::Buffer;
        self.params.push(Param {
            name,
            group,
            frozen,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Appends a copy of `src` under a new name and group.
    pub fn duplicate(&mut self, src: ParamId, name: String, group: ParamGroup) -> ParamId {
        let value = self.params[src.0].value.clone();
        self.push(name, group, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Freezes every group for which `frozen(group)` holds and unfreezes the
    /// rest. Buffers stay frozen regardless.
    pub fn set_frozen_by(&mut self, frozen: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.frozen = p.group == ParamGroup::Buffer || frozen(p.group);
        }
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_elements(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over the bit patterns of every parameter in `group`, in store
    /// order. Used to prove that frozen groups are untouched by training.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    frozen: p.frozen,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Grads<F> {
    pub(crate) map: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<F>) {
        self.map.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self` (gradient accumulation).
    pub fn accumulate(&mut self, other: Grads<F>) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
