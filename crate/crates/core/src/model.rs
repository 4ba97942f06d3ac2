//! Encoder-forecaster network with GRU-state shortcuts.
//!
//! Encoder stage `d` downsamples each frame with a strided residual block and
//! feeds the result to a GRU starting from zeros. The final encoder states pass
//! through one convolution each and seed the forecaster GRUs of the same depth.
//! The forecaster runs deepest first: each stage unrolls `output_frames` steps,
//! upsamples every state 2× and refines it with a residual block, and that
//! sequence drives the next shallower stage. The deepest stage is driven by
//! its learned constant input. The top sequence goes through the projection
//! head frame by frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, GruCell, GruVariant, ParamStore, ProjectionHead, ResidualBlock};
use crate::tensor::{Eval, Exec, Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: GruVariant,
    pub depth: usize,
    pub stage_channels: Vec<usize>,
    /// Dynamic variables plus static rasters per input frame.
    pub input_channels: usize,
    pub input_frames: usize,
    pub output_frames: usize,
    /// Kernel of the GRU gate transforms (the convolution in ConvGRU, both
    /// convolutions of each gate block in ResGRU).
    pub gru_kernel: usize,
    /// Kernel of the encoder/forecaster residual blocks and the shortcut convolutions.
    pub block_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: GruVariant::ConvGru,
            depth: 4,
            stage_channels: vec![32, 64, 128, 256],
            input_channels: 7,
            input_frames: 4,
            output_frames: 32,
            gru_kernel: 3,
            block_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: GruVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.stage_channels.len() != self.depth {
            return bad(format!(
                "stage_channels has {} entries but depth is {}",
                self.stage_channels.len(),
                self.depth
            ));
        }
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.input_frames == 0 || self.output_frames == 0 {
            return bad("input_frames and output_frames must be positive".into());
        }
        for (name, k) in [("gru_kernel", self.gru_kernel), ("block_kernel", self.block_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        Ok(())
    }

    /// Frames needed per training sample.
    pub fn window_length(&self) -> usize {
        self.input_frames + self.output_frames
    }

    pub fn check_geometry(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(shape_err!(
                "spatial size {}x{} is not divisible by 2^depth = {}",
                height,
                width,
                f
            ));
        }
        Ok(())
    }

    /// `(height, width)` of each encoder stage's state for the given input size.
    pub fn stage_resolutions(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        (1..=self.depth).map(|d| (height >> d, width >> d)).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

/// Switches for ablation-style probes of the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace every shortcut convolution's output with zeros.
    pub zero_shortcuts: bool,
}

pub struct ForwardOutput<V> {
    /// `[B, output_frames, 1, H, W]`.
    pub prediction: V,
    /// Shape of each encoder stage's final state, shallowest first.
    pub encoder_state_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct EncoderForecaster<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder_blocks: Vec<ResidualBlock>,
    encoder_cells: Vec<GruCell>,
    shortcuts: Vec<Conv2d>,
    forecaster_cells: Vec<GruCell>,
    forecaster_blocks: Vec<ResidualBlock>,
    head: ProjectionHead,
}

impl<T: Float> EncoderForecaster<T> {
    /// Build with fan-in uniform conv weights, zero biases and zero constant
    /// inputs, all drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.stage_channels;
        let depth = config.depth;
        let (gk, bk) = (config.gru_kernel, config.block_kernel);

        let mut encoder_blocks = Vec::with_capacity(depth);
        let mut encoder_cells = Vec::with_capacity(depth);
        for d in 0..depth {
            let cin = if d == 0 { config.input_channels } else { ch[d - 1] };
            let name = format!("encoder.{d}");
            encoder_blocks.push(ResidualBlock::new(
                &mut store,
                &mut rng,
                &format!("{name}.block"),
                cin,
                ch[d],
                bk,
                2,
                true,
            )?);
            encoder_cells.push(GruCell::new(
                &mut store,
                &mut rng,
                &format!("{name}.gru"),
                config.variant,
                ch[d],
                ch[d],
                gk,
                false,
            )?);
        }
        let shortcuts = (0..depth)
            .map(|d| Conv2d::new(&mut store, &mut rng, &format!("shortcut.{d}"), ch[d], ch[d], bk, 1))
            .collect::<Result<Vec<_>>>()?;
        let mut forecaster_cells = Vec::with_capacity(depth);
        let mut forecaster_blocks = Vec::with_capacity(depth);
        for d in 0..depth {
            let name = format!("forecaster.{d}");
            let deepest = d == depth - 1;
            forecaster_cells.push(GruCell::new(
                &mut store,
                &mut rng,
                &format!("{name}.gru"),
                config.variant,
                ch[d],
                ch[d],
                gk,
                deepest,
            )?);
            let cout = if d == 0 { ch[0] } else { ch[d - 1] };
            forecaster_blocks.push(ResidualBlock::new(
                &mut store,
                &mut rng,
                &format!("{name}.block"),
                ch[d],
                cout,
                bk,
                1,
                true,
            )?);
        }
        let head = ProjectionHead::new(&mut store, &mut rng, "head", ch[0])?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder_blocks,
            encoder_cells,
            shortcuts,
            forecaster_cells,
            forecaster_blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn encoder_cells(&self) -> &[GruCell] {
        &self.encoder_cells
    }

    pub fn forecaster_cells(&self) -> &[GruCell] {
        &self.forecaster_cells
    }

    pub fn shortcuts(&self) -> &[Conv2d] {
        &self.shortcuts
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Float>(&self) -> EncoderForecaster<U> {
        EncoderForecaster {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder_blocks: self.encoder_blocks.clone(),
            encoder_cells: self.encoder_cells.clone(),
            shortcuts: self.shortcuts.clone(),
            forecaster_cells: self.forecaster_cells.clone(),
            forecaster_blocks: self.forecaster_blocks.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 5 {
            return Err(shape_err!("model input must be [B,T,C,H,W], got {:?}", shape));
        }
        if shape[1] != c.input_frames {
            return Err(shape_err!(
                "model expects {} input frames, got {}",
                c.input_frames,
                shape[1]
            ));
        }
        if shape[2] != c.input_channels {
            return Err(shape_err!(
                "model expects {} input channels, got {}",
                c.input_channels,
                shape[2]
            ));
        }
        c.check_geometry(shape[3], shape[4])
    }

    pub fn forward<E: Exec<T>>(&self, ex: &mut E, input: &E::V) -> Result<E::V> {
        Ok(self
            .forward_with(ex, input, ForwardOptions::default())?
            .prediction)
    }

    pub fn forward_with<E: Exec<T>>(
        &self,
        ex: &mut E,
        input: &E::V,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<E::V>> {
        let shape = ex.shape_of(input);
        self.check_input(&shape)?;
        let (batch, frames, height, width) = (shape[0], shape[1], shape[3], shape[4]);
        let depth = self.config.depth;
        let ch = &self.config.stage_channels;
        let res = self.config.stage_resolutions(height, width);
        let s = &self.store;

        let mut states: Vec<E::V> = (0..depth)
            .map(|d| ex.constant(Tensor::zeros(&[batch, ch[d], res[d].0, res[d].1])))
            .collect();
        for t in 0..frames {
            let mut x = ex.select_axis1(input, t)?;
            for d in 0..depth {
                let y = self.encoder_blocks[d].forward(s, ex, &x)?;
                states[d] = self.encoder_cells[d].step(s, ex, &y, &states[d])?;
                x = states[d].clone();
            }
        }
        let encoder_state_shapes = states.iter().map(|v| ex.shape_of(v)).collect();

        let mut inits = Vec::with_capacity(depth);
        for (d, h) in states.iter().enumerate() {
            let v = self.shortcuts[d].forward(s, ex, h)?;
            inits.push(if opts.zero_shortcuts {
                ex.constant(Tensor::zeros(&ex.shape_of(&v)))
            } else {
                v
            });
        }

        let steps = self.config.output_frames;
        let mut drive: Option<Vec<E::V>> = None;
        let mut frames_out = Vec::with_capacity(steps);
        for d in (0..depth).rev() {
            let cell = &self.forecaster_cells[d];
            let block = &self.forecaster_blocks[d];
            let constant = match drive {
                None => Some(cell.constant_frame(s, ex, batch, res[d].0, res[d].1)?),
                Some(_) => None,
            };
            let mut h = inits[d].clone();
            let mut next = Vec::with_capacity(steps);
            for t in 0..steps {
                let x = match (&drive, &constant) {
                    (Some(xs), _) => xs[t].clone(),
                    (None, Some(c)) => c.clone(),
                    (None, None) => unreachable!(),
                };
                h = cell.step(s, ex, &x, &h)?;
                let up = ex.upsample2x(&h)?;
                let y = block.forward(s, ex, &up)?;
                if d == 0 {
                    frames_out.push(self.head.forward(s, ex, &y)?);
                } else {
                    next.push(y);
                }
            }
            drive = Some(next);
        }
        let prediction = ex.stack_axis1(&frames_out)?;
        Ok(ForwardOutput {
            prediction,
            encoder_state_shapes,
        })
    }

    /// Tape-free forward pass: `[B, Tin, C, H, W]` → `[B, Tout, 1, H, W]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ex = Eval::new();
        let x = ex.constant(input.clone());
        let y = self.forward(&mut ex, &x)?;
        Ok(ex.tensor(&y))
    }
}
