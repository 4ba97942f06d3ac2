use rand::Rng;

use super::windows::SampleWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dihedral transform of the image plane: left-right mirror, then top-down
/// mirror, then `rotation` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AugmentOp {
    pub rotation: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentOp {
    pub const IDENTITY: AugmentOp = AugmentOp {
        rotation: 0,
        flip_h: false,
        flip_v: false,
    };

    pub fn new(rotation: u8, flip_h: bool, flip_v: bool) -> Result<Self> {
        if rotation > 3 {
            return Err(Error::InvalidArgument(format!(
                "rotation must be 0..=3 quarter turns, got {rotation}"
            )));
        }
        Ok(Self {
            rotation,
            flip_h,
            flip_v,
        })
    }

    /// All 16 parameter combinations.
    pub fn all() -> Vec<AugmentOp> {
        let mut v = Vec::with_capacity(16);
        for rotation in 0..4 {
            for flip_h in [false, true] {
                for flip_v in [false, true] {
                    v.push(AugmentOp {
                        rotation,
                        flip_h,
                        flip_v,
                    });
                }
            }
        }
        v
    }

    /// Uniform draw over the 16 combinations.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            rotation: rng.gen_range(0..4),
            flip_h: rng.gen(),
            flip_v: rng.gen(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0 && !self.flip_h && !self.flip_v
    }

    /// Output `(height, width)` for an `h×w` plane.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rotation % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.rotation > 3 {
            return Err(Error::InvalidArgument(format!(
                "rotation must be 0..=3 quarter turns, got {}",
                self.rotation
            )));
        }
        if self.rotation % 2 == 1 && h != w {
            return Err(Error::InvalidArgument(format!(
                "odd rotation needs square frames, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Transform one row-major `h×w` plane.
    pub fn apply_plane<T: Copy>(&self, src: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        self.check(h, w)?;
        if src.len() != h * w {
            return Err(Error::Shape(format!(
                "plane of {} values is not {h}x{w}",
                src.len()
            )));
        }
        let mut cur = src.to_vec();
        if self.flip_h {
            for row in cur.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.flip_v {
            cur = cur.chunks_exact(w).rev().flatten().copied().collect();
        }
        if self.rotation >= 2 {
            cur.reverse();
        }
        if self.rotation % 2 == 1 {
            // Counter-clockwise: out[i][j] = in[j][n-1-i] on a square n×n plane.
            let n = h;
            let prev = cur;
            cur = (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    prev[j * n + (n - 1 - i)]
                })
                .collect();
        }
        Ok(cur)
    }

    /// Transform every trailing `h×w` plane of a tensor of rank ≥ 2.
    pub fn apply_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("cannot augment tensor of shape {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        self.check(h, w)?;
        if self.is_identity() {
            return Ok(x.clone());
        }
        let mut out = Vec::with_capacity(x.len());
        if h * w > 0 {
            for plane in x.data().chunks_exact(h * w) {
                out.extend(self.apply_plane(plane, h, w)?);
            }
        }
        let (oh, ow) = self.output_size(h, w);
        let mut oshape = shape.to_vec();
        let n = oshape.len();
        oshape[n - 2] = oh;
        oshape[n - 1] = ow;
        Tensor::new(&oshape, out)
    }

    /// Apply the same transform to inputs (static rasters included), targets
    /// and target mask.
    pub fn apply(&self, window: &SampleWindow) -> Result<SampleWindow> {
        Ok(SampleWindow {
            inputs: self.apply_tensor(&window.inputs)?,
            targets: self.apply_tensor(&window.targets)?,
            target_mask: self.apply_tensor(&window.target_mask)?,
            region: window.region.clone(),
            start: window.start,
        })
    }
}
