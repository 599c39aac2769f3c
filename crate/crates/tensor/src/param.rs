use std::collections::BTreeMap;

use rand::Rng;

use crate::{Result, Tensor, TensorError};

pub type ParamId = usize;

/// A trainable tensor plus its ADAM state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: None,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered collection of named parameters.
///
/// Insertion order is stable and is the order used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    /// Registers a parameter drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(Parameter::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// L2 norm over every populated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest `f32`; used for 32-bit weight storage.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
