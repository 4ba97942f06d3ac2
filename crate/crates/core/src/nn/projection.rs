use rand::Rng;

use super::conv::Conv2d;
use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::{Exec, Float};

/// 1×1 convolution to a single channel followed by a sigmoid.
///
/// The sigmoid output is clamped to `[ε/2, 1 − ε/2]` (ε the machine epsilon
/// of `T`) so that saturated logits still land strictly inside (0, 1).
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub conv: Conv2d,
}

impl ProjectionHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, name, channels, 1, 1, 1)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn forward<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
    ) -> Result<E::V> {
        let logits = self.conv.forward(store, ex, x)?;
        let p = ex.sigmoid(&logits);
        let margin = T::EPSILON * T::from_f64(0.5);
        Ok(ex.clamp(&p, margin, T::ONE - margin))
    }
}
