//! Synthetic archives of Gaussian blobs drifting at constant velocity.
//!
//! Every sequence draws a shared drift and a few blobs. The summed blob
//! intensity `f` produces one analogue per target variable:
//!
//! | channel               | value                           |
//! |-----------------------|---------------------------------|
//! | `temperature`         | `0.8 - 0.6 * min(f, 1)`         |
//! | `crr_intensity`       | `clamp(2 * (f - 0.5), 0, 1)`    |
//! | `asii_turb_trop_prob` | `min(f, 1)`                     |
//! | `cma`                 | `1` where `f >= 0.25`, else `0` |
//!
//! Consecutive sequences are separated by a timestamp gap, so each one is a
//! separate gapless run.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{FrameArchive, FRAME_STEP_SECONDS};
use crate::error::{Error, Result};
use crate::metrics::Variable;
use crate::tensor::Tensor;

pub const STATIC_NAMES: [&str; 3] = ["elevation", "latitude", "longitude"];
/// Timestamp of the first synthetic frame (2020-01-01T00:00:00Z).
pub const SYNTH_EPOCH: u64 = 1_577_836_800;
/// Threshold on blob intensity that defines the cloud-mask analogue.
pub const CMA_THRESHOLD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub height: usize,
    pub width: usize,
    pub blobs_per_sequence: usize,
    /// Upper bound on drift speed in pixels per frame.
    pub max_speed: f64,
    /// Knock out a corner patch of the temperature channel every this many
    /// frames (0 disables).
    pub missing_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 4,
            frames_per_sequence: 48,
            height: 64,
            width: 64,
            blobs_per_sequence: 3,
            max_speed: 1.0,
            missing_every: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::InvalidArgument(
                "synthetic archive needs at least one sequence of one frame".into(),
            ));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic frames must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= 0.0) {
            return Err(Error::InvalidArgument("max_speed must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One Gaussian blob; position in pixels (row, column) at frame 0 of its
/// sequence, velocity in pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub y: f64,
    pub x: f64,
    pub vy: f64,
    pub vx: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn center_at(&self, t: f64) -> (f64, f64) {
        (self.y + self.vy * t, self.x + self.vx * t)
    }
}

/// The blobs of every sequence, in sequence order.
pub fn sequence_blobs(cfg: &SynthConfig) -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let size = h.min(w);
    (0..cfg.sequences)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let speed = cfg.max_speed * rng.gen_range(0.25..=1.0);
            let (vy, vx) = (speed * angle.sin(), speed * angle.cos());
            (0..cfg.blobs_per_sequence)
                .map(|_| Blob {
                    y: rng.gen_range(0.25..0.75) * h,
                    x: rng.gen_range(0.25..0.75) * w,
                    vy,
                    vx,
                    sigma: rng.gen_range(0.06..0.14) * size,
                    amplitude: rng.gen_range(0.6..1.0),
                })
                .collect()
        })
        .collect()
}

/// Summed blob intensity at frame `t` on an `h×w` grid, sampled at pixel centres.
pub fn blob_field(blobs: &[Blob], t: f64, h: usize, w: usize) -> Vec<f64> {
    let mut f = vec![0.0; h * w];
    for b in blobs {
        let (cy, cx) = b.center_at(t);
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        let gy: Vec<f64> = (0..h).map(|i| (-(i as f64 - cy).powi(2) * inv).exp()).collect();
        let gx: Vec<f64> = (0..w).map(|j| (-(j as f64 - cx).powi(2) * inv).exp()).collect();
        for (i, row) in f.chunks_exact_mut(w).enumerate() {
            for (v, g) in row.iter_mut().zip(&gx) {
                *v += b.amplitude * gy[i] * g;
            }
        }
    }
    f
}

/// Intensity-weighted centroid `(row, column)` of a plane.
pub fn centroid(plane: &[f64], w: usize) -> Option<(f64, f64)> {
    let (mut m, mut my, mut mx) = (0.0, 0.0, 0.0);
    for (k, &v) in plane.iter().enumerate() {
        m += v;
        my += v * (k / w) as f64;
        mx += v * (k % w) as f64;
    }
    (m > 0.0).then(|| (my / m, mx / m))
}

fn channel_value(var: Variable, f: f64) -> f32 {
    let v = match var {
        Variable::Temperature => 0.8 - 0.6 * f.min(1.0),
        Variable::CrrIntensity => (2.0 * (f - 0.5)).clamp(0.0, 1.0),
        Variable::AsiiTurbTropProb => f.min(1.0),
        Variable::Cma => {
            if f >= CMA_THRESHOLD {
                1.0
            } else {
                0.0
            }
        }
    };
    v as f32
}

fn static_rasters(cfg: &SynthConfig) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
            data.push((0.5 + 0.25 * (2.0 * PI * x + phase).sin() * (2.0 * PI * y).cos()) as f32);
        }
    }
    for i in 0..h {
        data.extend(std::iter::repeat_n((1.0 - i as f64 / (h - 1) as f64) as f32, w));
    }
    for _ in 0..h {
        data.extend((0..w).map(|j| (j as f64 / (w - 1) as f64) as f32));
    }
    Tensor::new(&[3, h, w], data).expect("static raster size")
}

/// Build the archive described by `cfg`. Deterministic in `cfg`.
pub fn synthesize(cfg: &SynthConfig) -> Result<FrameArchive> {
    cfg.validate()?;
    let (h, w, fps) = (cfg.height, cfg.width, cfg.frames_per_sequence);
    let plane = h * w;
    let c = Variable::ALL.len();
    let total = cfg.sequences * fps;
    let mut frames = Vec::with_capacity(total * c * plane);
    let mut mask = Vec::with_capacity(total * c * plane);
    let mut timestamps = Vec::with_capacity(total);
    let (ph, pw) = ((h / 8).max(1), (w / 8).max(1));
    let mut ts = SYNTH_EPOCH;
    for (s, blobs) in sequence_blobs(cfg).iter().enumerate() {
        if s > 0 {
            // Skip two slots so the sequences never join into one run.
            ts += 2 * FRAME_STEP_SECONDS;
        }
        for t in 0..fps {
            timestamps.push(ts);
            ts += FRAME_STEP_SECONDS;
            let field = blob_field(blobs, t as f64, h, w);
            let knocked = cfg.missing_every > 0 && t % cfg.missing_every == cfg.missing_every - 1;
            for var in Variable::ALL {
                for (k, &f) in field.iter().enumerate() {
                    let hole = knocked
                        && var == Variable::Temperature
                        && k / w < ph
                        && k % w < pw;
                    if hole {
                        frames.push(0.0);
                        mask.push(0);
                    } else {
                        frames.push(channel_value(var, f));
                        mask.push(1);
                    }
                }
            }
        }
    }
    FrameArchive::new(
        Tensor::new(&[total, c, h, w], frames)?,
        mask,
        timestamps,
        Variable::ALL.iter().map(|v| v.name().to_string()).collect(),
        static_rasters(cfg),
        STATIC_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}
