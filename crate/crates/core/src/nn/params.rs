use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a weight tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace every tensor by name, requiring identical names and shapes.
    pub fn assign(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} weight tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self.find(name).ok_or_else(|| {
                Error::Shape(format!("unknown weight tensor '{name}' for this configuration"))
            })?;
            let want = self.tensors[id.0].shape();
            if want != t.shape() {
                return Err(Error::Shape(format!(
                    "weight tensor '{name}' has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        for (name, t) in named {
            let id = self.find(name).expect("checked above");
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Uniform in `±1/sqrt(fan_in)`; values are drawn in f64 so f32 and f64
/// builds from the same seed agree up to rounding.
pub fn fan_in_uniform<T: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}
