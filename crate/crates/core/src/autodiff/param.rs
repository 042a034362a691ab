use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::DiffArray;
use crate::error::{Error, Result};
use crate::rng;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: DiffArray,
    pub name: String,
    pub frozen: bool,
}

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    FanIn(usize),
    Const(f32),
}

/// Ordered collection of parameters with deterministic, name-seeded init.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Each parameter draws from its own stream keyed by
    /// `(seed, name)`, so values do not depend on registration order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(c) => alloc::vec![c; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let mut r = rng::stream(self.seed, name);
                (0..n).map(|_| r.gen_range(-bound..=bound)).collect()
            }
        };
        let value = DiffArray::new(shape, data)?.with_grad();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            value,
            name: name.to_string(),
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// Adds gradients produced by [`Tape::param_grads`](super::Tape::param_grads).
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f32>)]) -> Result<()> {
        for (id, g) in grads {
            self.params[id.0].value.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Overwrites the value of `name`; shape must match.
    pub fn load(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != shape {
            return Err(Error::Shape {
                op: "ParamStore::load",
                detail: format!("`{}` is {:?}, checkpoint has {:?}", name, p.value.shape(), shape),
            });
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }
}
