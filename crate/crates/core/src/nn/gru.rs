//! Convolutional gated recurrent cells.
//!
//! Both variants compute, with `[a, b]` the channel concatenation:
//!
//! ```text
//! z  = σ(G_z([x, h]))
//! r  = σ(G_r([x, h]))
//! h̃  = tanh(G_h([x, r ⊙ h]))
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! ConvGRU uses a single `k×k` convolution for each `G`; ResGRU uses a
//! stride-1 residual block (without the trailing activation) for each.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::Conv2d;
use super::params::{ParamId, ParamStore};
use super::residual::ResidualBlock;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Exec, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GruVariant {
    ConvGru,
    ResGru,
}

impl std::fmt::Display for GruVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GruVariant::ConvGru => "convgru",
            GruVariant::ResGru => "resgru",
        })
    }
}

/// Transformation producing one gate's pre-activation.
#[derive(Clone, Debug)]
pub enum Gate {
    Conv(Conv2d),
    Residual(ResidualBlock),
}

impl Gate {
    fn forward<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
    ) -> Result<E::V> {
        match self {
            Gate::Conv(c) => c.forward(store, ex, x),
            Gate::Residual(b) => b.forward(store, ex, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Gate::Conv(c) => c.param_count(),
            Gate::Residual(b) => b.param_count(),
        }
    }

    /// Parameter holding the bias added last in the gate, used by tests to
    /// pin a gate's pre-activation.
    pub fn output_bias(&self) -> ParamId {
        match self {
            Gate::Conv(c) => c.bias,
            Gate::Residual(b) => b.conv2.bias,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub variant: GruVariant,
    pub input_channels: usize,
    pub state_channels: usize,
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    /// Learned per-channel input fed at every step when the cell is unrolled
    /// without an input sequence.
    pub constant_input: Option<ParamId>,
}

/// All intermediate values of one step.
pub struct GruTrace<V> {
    pub update: V,
    pub reset: V,
    pub candidate: V,
    pub state: V,
}

impl GruCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        variant: GruVariant,
        input_channels: usize,
        state_channels: usize,
        kernel: usize,
        constant_input: bool,
    ) -> Result<Self> {
        let both = input_channels + state_channels;
        let mut gate = |g: &str| -> Result<Gate> {
            let n = format!("{name}.{g}");
            Ok(match variant {
                GruVariant::ConvGru => {
                    Gate::Conv(Conv2d::new(store, rng, &n, both, state_channels, kernel, 1)?)
                }
                GruVariant::ResGru => Gate::Residual(ResidualBlock::new(
                    store,
                    rng,
                    &n,
                    both,
                    state_channels,
                    kernel,
                    1,
                    false,
                )?),
            })
        };
        let update = gate("update")?;
        let reset = gate("reset")?;
        let candidate = gate("candidate")?;
        let constant_input = constant_input.then(|| {
            store.add(format!("{name}.const_input"), Tensor::zeros(&[input_channels]))
        });
        Ok(Self {
            variant,
            input_channels,
            state_channels,
            update,
            reset,
            candidate,
            constant_input,
        })
    }

    pub fn param_count(&self) -> usize {
        self.update.param_count()
            + self.reset.param_count()
            + self.candidate.param_count()
            + if self.constant_input.is_some() {
                self.input_channels
            } else {
                0
            }
    }

    fn check<T: Float, E: Exec<T>>(&self, ex: &E, x: &E::V, h: &E::V) -> Result<()> {
        let xs = ex.shape_of(x);
        let hs = ex.shape_of(h);
        if xs.len() != 4
            || hs.len() != 4
            || xs[0] != hs[0]
            || xs[2..] != hs[2..]
            || xs[1] != self.input_channels
            || hs[1] != self.state_channels
        {
            return Err(shape_err!(
                "gru step expects input [B,{},H,W] and state [B,{},H,W], got {:?} and {:?}",
                self.input_channels,
                self.state_channels,
                xs,
                hs
            ));
        }
        Ok(())
    }

    pub fn step_traced<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
        h: &E::V,
    ) -> Result<GruTrace<E::V>> {
        self.check(ex, x, h)?;
        let xh = ex.concat_channels(x, h)?;
        let z = self.update.forward(store, ex, &xh)?;
        let z = ex.sigmoid(&z);
        let r = self.reset.forward(store, ex, &xh)?;
        let r = ex.sigmoid(&r);
        let rh = ex.mul(&r, h)?;
        let xrh = ex.concat_channels(x, &rh)?;
        let c = self.candidate.forward(store, ex, &xrh)?;
        let c = ex.tanh(&c);
        let keep = ex.one_minus(&z);
        let kept = ex.mul(&keep, h)?;
        let fresh = ex.mul(&z, &c)?;
        let state = ex.add(&kept, &fresh)?;
        Ok(GruTrace {
            update: z,
            reset: r,
            candidate: c,
            state,
        })
    }

    pub fn step<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        x: &E::V,
        h: &E::V,
    ) -> Result<E::V> {
        Ok(self.step_traced(store, ex, x, h)?.state)
    }

    /// The learned constant input expanded to `[batch, C, height, width]`.
    pub fn constant_frame<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<E::V> {
        let id = self.constant_input.ok_or_else(|| {
            Error::InvalidArgument("cell has no learned constant input".into())
        })?;
        let v = ex.param(id.0, store.get(id));
        ex.expand_channels(&v, batch, height, width)
    }

    /// Run `steps` recurrent steps from `h0`. With `inputs = None` the learned
    /// constant input drives every step.
    pub fn unroll<T: Float, E: Exec<T>>(
        &self,
        store: &ParamStore<T>,
        ex: &mut E,
        inputs: Option<&[E::V]>,
        h0: &E::V,
        steps: usize,
    ) -> Result<Vec<E::V>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("gru unroll needs at least one step".into()));
        }
        if let Some(xs) = inputs {
            if xs.len() != steps {
                return Err(Error::InvalidArgument(format!(
                    "gru unroll of {steps} steps given {} inputs",
                    xs.len()
                )));
            }
        }
        let constant = match inputs {
            Some(_) => None,
            None => {
                let s = ex.shape_of(h0);
                if s.len() != 4 {
                    return Err(shape_err!("gru state must be 4-D, got {:?}", s));
                }
                Some(self.constant_frame(store, ex, s[0], s[2], s[3])?)
            }
        };
        let mut states = Vec::with_capacity(steps);
        let mut h = h0.clone();
        for t in 0..steps {
            let x = match (inputs, &constant) {
                (Some(xs), _) => xs[t].clone(),
                (None, Some(c)) => c.clone(),
                (None, None) => unreachable!(),
            };
            h = self.step(store, ex, &x, &h)?;
            states.push(h.clone());
        }
        Ok(states)
    }
}
