use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::AugmentOp;
use super::windows::SampleWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacked samples ready for the model.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, input_frames, Cin, H, W]`.
    pub inputs: Tensor<f32>,
    /// `[B, output_frames, 1, H, W]`.
    pub targets: Tensor<f32>,
    pub target_mask: Tensor<f32>,
    /// Position of each sample in the window list.
    pub indices: Vec<usize>,
    pub ops: Vec<AugmentOp>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Stack the given windows after applying each one's transform.
    pub fn assemble(windows: &[SampleWindow], picks: &[(usize, AugmentOp)]) -> Result<Batch> {
        if picks.is_empty() {
            return Err(Error::Empty("cannot assemble an empty batch".into()));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        let mut shapes: Option<(Vec<usize>, Vec<usize>)> = None;
        for &(i, op) in picks {
            let w = windows.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("window index {i} out of range"))
            })?;
            let w = if op.is_identity() { w.clone() } else { op.apply(w)? };
            let s = (w.inputs.shape().to_vec(), w.targets.shape().to_vec());
            match &shapes {
                None => shapes = Some(s),
                Some(prev) if *prev != s => {
                    return Err(Error::Shape(format!(
                        "window {i} has shapes {s:?}, batch started with {prev:?}"
                    )))
                }
                Some(_) => {}
            }
            inputs.extend_from_slice(w.inputs.data());
            targets.extend_from_slice(w.targets.data());
            mask.extend_from_slice(w.target_mask.data());
        }
        let (ishape, tshape) = shapes.expect("non-empty batch");
        let b = picks.len();
        let with_batch = |s: &[usize]| std::iter::once(b).chain(s.iter().copied()).collect::<Vec<_>>();
        Ok(Batch {
            inputs: Tensor::new(&with_batch(&ishape), inputs)?,
            targets: Tensor::new(&with_batch(&tshape), targets)?,
            target_mask: Tensor::new(&with_batch(&tshape), mask)?,
            indices: picks.iter().map(|p| p.0).collect(),
            ops: picks.iter().map(|p| p.1).collect(),
        })
    }
}

/// Random stream for one epoch, independent of how many epochs ran before.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Shuffled order and per-sample transforms for one epoch, split into batches.
/// The last batch is short when `n` is not a multiple of `batch_size`.
pub fn epoch_plan(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
) -> Result<Vec<Vec<(usize, AugmentOp)>>> {
    if n == 0 {
        return Err(Error::Empty("no windows to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let picks: Vec<(usize, AugmentOp)> = order
        .into_iter()
        .map(|i| {
            let op = if augment {
                AugmentOp::sample(&mut rng)
            } else {
                AugmentOp::IDENTITY
            };
            (i, op)
        })
        .collect();
    Ok(picks.chunks(batch_size).map(<[_]>::to_vec).collect())
}

/// One shuffled pass over `windows`.
pub struct BatchIterator<'a> {
    windows: &'a [SampleWindow],
    plan: std::vec::IntoIter<Vec<(usize, AugmentOp)>>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        windows: &'a [SampleWindow],
        batch_size: usize,
        seed: u64,
        epoch: u64,
        augment: bool,
    ) -> Result<Self> {
        let plan = epoch_plan(windows.len(), batch_size, seed, epoch, augment)?;
        Ok(Self {
            windows,
            plan: plan.into_iter(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.plan
            .next()
            .map(|picks| Batch::assemble(self.windows, &picks))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.plan.len(), Some(self.plan.len()))
    }
}

impl ExactSizeIterator for BatchIterator<'_> {}
