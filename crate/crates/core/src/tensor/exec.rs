use std::collections::HashMap;
use std::sync::Arc;

use super::graph::{clamp, elementwise_binary, Binary};
use super::kernels;
use super::{Float, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

/// The operations layers are built from. Implemented by [`Graph`] (records a
/// tape for backward) and [`Eval`] (plain forward evaluation that frees
/// intermediates as soon as they go out of scope).
pub trait Exec<T: Float> {
    type V: Clone;

    /// A trainable weight identified by a stable `key`.
    fn param(&mut self, key: usize, value: &Tensor<T>) -> Self::V;
    fn constant(&mut self, value: Tensor<T>) -> Self::V;
    fn shape_of(&self, v: &Self::V) -> Vec<usize>;
    fn tensor(&self, v: &Self::V) -> Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: &Self::V,
        stride: usize,
        pad: usize,
    ) -> Result<Self::V>;
    fn upsample2x(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn tanh(&mut self, x: &Self::V) -> Self::V;
    fn one_minus(&mut self, x: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: T) -> Self::V;
    fn clamp(&mut self, x: &Self::V, lo: T, hi: T) -> Self::V;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn expand_channels(&mut self, v: &Self::V, batch: usize, h: usize, w: usize)
        -> Result<Self::V>;
    fn select_axis1(&mut self, x: &Self::V, index: usize) -> Result<Self::V>;
    fn stack_axis1(&mut self, parts: &[Self::V]) -> Result<Self::V>;
}

impl<T: Float> Exec<T> for Graph<T> {
    type V = Var;

    fn param(&mut self, key: usize, value: &Tensor<T>) -> Var {
        Graph::param(self, key, value)
    }
    fn constant(&mut self, value: Tensor<T>) -> Var {
        Graph::constant(self, value)
    }
    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.shape(*v).to_vec()
    }
    fn tensor(&self, v: &Var) -> Tensor<T> {
        self.value(*v).clone()
    }
    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv2d(self, *x, *w, *b, stride, pad)
    }
    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        Graph::upsample2x(self, *x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::mul(self, *a, *b)
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        Graph::sigmoid(self, *x)
    }
    fn tanh(&mut self, x: &Var) -> Var {
        Graph::tanh(self, *x)
    }
    fn one_minus(&mut self, x: &Var) -> Var {
        Graph::one_minus(self, *x)
    }
    fn leaky_relu(&mut self, x: &Var, slope: T) -> Var {
        Graph::leaky_relu(self, *x, slope)
    }
    fn clamp(&mut self, x: &Var, lo: T, hi: T) -> Var {
        Graph::clamp(self, *x, lo, hi)
    }
    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::concat_channels(self, *a, *b)
    }
    fn expand_channels(&mut self, v: &Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        Graph::expand_channels(self, *v, batch, h, w)
    }
    fn select_axis1(&mut self, x: &Var, index: usize) -> Result<Var> {
        Graph::select_axis1(self, *x, index)
    }
    fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        Graph::stack_axis1(self, parts)
    }
}

/// Tape-free forward evaluation.
#[derive(Default)]
pub struct Eval<T> {
    params: HashMap<usize, Arc<Tensor<T>>>,
}

impl<T: Float> Eval<T> {
    pub fn new() -> Self {
        Self {
            params: HashMap::new(),
        }
    }
}

type Val<T> = Arc<Tensor<T>>;

impl<T: Float> Exec<T> for Eval<T> {
    type V = Val<T>;

    fn param(&mut self, key: usize, value: &Tensor<T>) -> Val<T> {
        self.params
            .entry(key)
            .or_insert_with(|| Arc::new(value.clone()))
            .clone()
    }
    fn constant(&mut self, value: Tensor<T>) -> Val<T> {
        Arc::new(value)
    }
    fn shape_of(&self, v: &Val<T>) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn tensor(&self, v: &Val<T>) -> Tensor<T> {
        (**v).clone()
    }
    fn conv2d(
        &mut self,
        x: &Val<T>,
        w: &Val<T>,
        b: &Val<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Val<T>> {
        kernels::conv2d(x, w, b, stride, pad).map(Arc::new)
    }
    fn upsample2x(&mut self, x: &Val<T>) -> Result<Val<T>> {
        kernels::upsample2x(x).map(Arc::new)
    }
    fn add(&mut self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        elementwise_binary(Binary::Add, a, b).map(Arc::new)
    }
    fn sub(&mut self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        elementwise_binary(Binary::Sub, a, b).map(Arc::new)
    }
    fn mul(&mut self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        elementwise_binary(Binary::Mul, a, b).map(Arc::new)
    }
    fn sigmoid(&mut self, x: &Val<T>) -> Val<T> {
        Arc::new(x.map(Float::sigmoid))
    }
    fn tanh(&mut self, x: &Val<T>) -> Val<T> {
        Arc::new(x.map(Float::tanh))
    }
    fn one_minus(&mut self, x: &Val<T>) -> Val<T> {
        Arc::new(x.map(|v| T::ONE - v))
    }
    fn leaky_relu(&mut self, x: &Val<T>, slope: T) -> Val<T> {
        Arc::new(x.map(|v| kernels::leaky_relu(v, slope)))
    }
    fn clamp(&mut self, x: &Val<T>, lo: T, hi: T) -> Val<T> {
        Arc::new(x.map(|v| clamp(v, lo, hi)))
    }
    fn concat_channels(&mut self, a: &Val<T>, b: &Val<T>) -> Result<Val<T>> {
        kernels::concat_channels(a, b).map(Arc::new)
    }
    fn expand_channels(&mut self, v: &Val<T>, batch: usize, h: usize, w: usize) -> Result<Val<T>> {
        kernels::expand_channels(v, batch, h, w).map(Arc::new)
    }
    fn select_axis1(&mut self, x: &Val<T>, index: usize) -> Result<Val<T>> {
        if x.rank() < 2 || index >= x.shape()[1] {
            return Err(shape_err!("select index {} on axis 1 of {:?}", index, x.shape()));
        }
        let mut shape = x.shape().to_vec();
        shape.remove(1);
        Ok(Arc::new(x.slice_axis1(index, 1)?.reshape(&shape)?))
    }
    fn stack_axis1(&mut self, parts: &[Val<T>]) -> Result<Val<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Tensor::stack_axis1(&refs).map(Arc::new)
    }
}
