use rand::Rng;

use super::conv::Conv2d;
use super::params::ParamStore;
use crate::error::{shape_err, Result};
use crate::tensor::{Exec, Float};

/// Negative-side slope of the leaky rectifier used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `act(conv2(act(conv1(x))) + shortcut(x))`.
///
/// `conv1` carries the stride. The shortcut is a strided 1×1 convolution
/// whenever the stride or channel count changes, otherwise the identity.
/// Blocks used as GRU gates skip the final activation so their output is a
/// linear pre-activation, like the convolution they stand in for.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub post_activation: bool,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        post_activation: bool,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, kernel, stride)?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, kernel, 1)?;
        let shortcut = if stride != 1 || cin != cout {
            Some(Conv2d::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
            post_activation,
        })
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    pub fn channels_in(&self) -> usize {
        self.conv1.cin
    }

    pub fn channels_out(&self) -> usize {
        self.conv2.cout
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.shortcut.as_ref().map_or(0, Conv2d::param_count)
    }

    pub fn forward<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
    ) -> Result<E::V> {
        let shape = ex.shape_of(x);
        let s = self.stride();
        if shape.len() != 4 || shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(shape_err!(
                "residual block with stride {} cannot take input {:?}",
                s,
                shape
            ));
        }
        let slope = T::from_f64(LEAKY_SLOPE);
        let y = self.conv1.forward(store, ex, x)?;
        let y = ex.leaky_relu(&y, slope);
        let y = self.conv2.forward(store, ex, &y)?;
        let sum = match &self.shortcut {
            Some(proj) => {
                let p = proj.forward(store, ex, x)?;
                ex.add(&y, &p)?
            }
            None => ex.add(&y, x)?,
        };
        Ok(if self.post_activation {
            ex.leaky_relu(&sum, slope)
        } else {
            sum
        })
    }
}
