use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor together with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub values: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weights yes, biases and norm
    /// affine terms no).
    pub decay: bool,
}

/// Ordered, name-indexed store of every parameter and non-learnable buffer
/// (batch-norm running statistics) of a model.
///
/// Insertion order is the construction order of the model, which makes
/// iteration deterministic for a given configuration.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: IndexMap<String, Parameter<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        values: Tensor<T>,
        trainable: bool,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        let (index, _) = self.params.insert_full(
            name,
            Parameter {
                values,
                grad: None,
                trainable,
                decay,
            },
        );
        Ok(ParamId(index))
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, values: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        let (index, _) = self.buffers.insert_full(name, values);
        Ok(BufferId(index))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn get_buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn get_buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Number of scalar values in parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| k.starts_with(prefix) && (!trainable_only || p.trainable))
            .map(|(_, p)| p.values.numel())
            .sum()
    }

    /// Copies every parameter and buffer value (no gradients).
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.values.clone()))
            .chain(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.register("a.w", Tensor::zeros(&[2]), true, true).unwrap();
        assert!(reg.register("a.w", Tensor::zeros(&[2]), true, true).is_err());
        assert!(reg.register_buffer("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_follows_registration_order() {
        let mut reg = ParamRegistry::<f32>::new();
        for name in ["z", "a", "m"] {
            reg.register(name, Tensor::zeros(&[1]), false, false).unwrap();
        }
        let names: Vec<_> = reg.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(names, ["z", "a", "m"]);
        assert_eq!(reg.id_of("a"), Some(ParamId(1)));
    }
}
