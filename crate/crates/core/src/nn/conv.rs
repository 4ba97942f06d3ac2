use rand::Rng;

use super::params::{fan_in_uniform, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Exec, Float, Tensor};

/// A `k×k` "same"-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "{name}: kernel size must be odd, got {kernel}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "{name}: stride must be 1 or 2, got {stride}"
            )));
        }
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin, kernel, kernel], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    pub fn forward<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
    ) -> Result<E::V> {
        let w = ex.param(self.weight.0, store.get(self.weight));
        let b = ex.param(self.bias.0, store.get(self.bias));
        ex.conv2d(x, &w, &b, self.stride, self.padding())
    }
}
