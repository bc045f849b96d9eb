use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers `tensor` under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.trainable());
        id
    }

    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.take_grad();
        }
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (name, src) in other.iter() {
            if let Some(id) = self.id(name) {
                let dst = &mut self.tensors[id.0];
                if dst.shape() == src.shape() {
                    dst.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[T]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let dst = &mut self.tensors[id.0];
        if dst.numel() != data.len() {
            return Err(Error::Shape {
                op: "set",
                lhs: dst.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        dst.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}
