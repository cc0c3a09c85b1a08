use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Initialization rule for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid("param", format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let mut normal = |std: f64| -> Vec<f64> {
            (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect()
        };
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Normal(std) => normal(std),
            Init::FanIn { fan_in, gain } => normal(gain / (fan_in.max(1) as f64).sqrt()),
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value: Tensor::new(shape.to_vec(), data)?,
            grad: vec![0.0; numel],
        });
        self.by_name.insert(name, id);
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Ids ordered by name, the order used for serialization.
    pub fn serialization_order(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.params.len()).map(ParamId).collect();
        ids.sort_by(|a, b| self.params[a.0].name.cmp(&self.params[b.0].name));
        ids
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}
