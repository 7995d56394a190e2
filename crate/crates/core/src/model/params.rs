use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(1 / rows)`.
    Uniform,
    Zeros,
    Ones,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub(crate) fn register(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Uniform => {
                let bound = (1.0 / shape[0].max(1) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| S::of(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).expect("shape matches data")
            }
        };
        assert!(
            self.index.insert(name.clone(), self.names.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Bound<S> {
        Bound {
            tape: tape.clone(),
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<S> {
    tape: Tape<S>,
    vars: Vec<Var<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn vars(&self) -> &[Var<S>] {
        &self.vars
    }

    pub(crate) fn var(&self, id: ParamId) -> &Var<S> {
        &self.vars[id.0]
    }
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
