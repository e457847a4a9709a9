use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(tensor.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            gradient,
        });
        Ok(id)
    }

    /// Registers an `out x in` weight drawn from `U(-1/sqrt(in), 1/sqrt(in))`
    /// and a zero bias of length `out`.
    pub fn add_affine<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<(ParamId, ParamId)> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let w = self.add(format!("{prefix}/W"), Tensor::matrix(fan_out, fan_in, w)?)?;
        let b = self.add(format!("{prefix}/b"), Tensor::zeros(&[fan_out]))?;
        Ok((w, b))
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    pub fn grad_squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.gradient.squared_norm()).sum()
    }

    /// Overwrites the value of an existing parameter, checking the shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }
}

/// Scales the gradients of all `stores` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores
        .iter()
        .map(|s| s.grad_squared_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.iter_mut() {
                p.gradient.values_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    norm
}
