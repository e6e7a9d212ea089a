//! Named, grouped learnable parameters.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Owning parameter group, e.g. `fusion.long` or `head`.
    pub group: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        self.params.push(Param { name: alloc::format!("{}.{}", group, name), group: group.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Ids of every parameter whose group equals `group` or starts with
    /// `group.`.
    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| {
                p.group == group
                    || (p.group.starts_with(group) && p.group.as_bytes().get(group.len()) == Some(&b'.'))
            })
            .map(|(id, _)| id)
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = Vec::new();
        for p in &self.params {
            if !g.contains(&p.group) {
                g.push(p.group.clone());
            }
        }
        g
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// He-normal initialization for a weight with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut crate::Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut crate::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}
