use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter groups, used to freeze parts of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Vision,
    Language,
    Projection,
    Cmae,
    Cluster,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Scaled normal initialization with standard deviation `1/sqrt(fan_in)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.normal() * std)).collect();
        self.add(name, group, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrite the value of a named parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Register every parameter on `tape`; those for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(ParamGroup) -> bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .zip(&self.groups)
            .map(|(t, &g)| tape.leaf(t.clone(), trainable(g)))
            .collect();
        Binding { vars }
    }
}

/// Tape variables for one forward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
