use std::ops::Range;

use super::archive::FrameArchive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A training or evaluation sample cut from one gapless stretch of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[input_frames, C + S, H, W]`: all dynamic channels followed by the
    /// static rasters, repeated for every input frame.
    pub inputs: Tensor<f32>,
    /// `[output_frames, 1, H, W]`: the target channel only.
    pub targets: Tensor<f32>,
    /// Same shape as `targets`, 1.0 where the target is valid.
    pub target_mask: Tensor<f32>,
    pub region: String,
    /// Index of the first input frame in the archive.
    pub start: usize,
}

impl SampleWindow {
    pub fn height(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.inputs.shape()[3]
    }
}

/// How a window splits into inputs and targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub input_frames: usize,
    pub output_frames: usize,
    /// Dynamic channel copied into `targets`.
    pub target_channel: usize,
}

impl WindowLayout {
    pub fn length(&self) -> usize {
        self.input_frames + self.output_frames
    }
}

/// Start index of every window of `length` frames that lies inside one of `runs`.
pub fn starts_in_runs(runs: &[Range<usize>], length: usize) -> Vec<usize> {
    runs.iter()
        .filter(|r| r.len() >= length)
        .flat_map(|r| r.start..=r.end - length)
        .collect()
}

/// Start indices of all gapless windows of `length` frames.
pub fn window_starts(archive: &FrameArchive, length: usize) -> Result<Vec<usize>> {
    if length == 0 {
        return Err(Error::InvalidArgument("window length must be at least 1".into()));
    }
    Ok(starts_in_runs(&archive.gapless_runs(), length))
}

/// The `[input_frames, C + S, H, W]` model input for frames
/// `start..start + input_frames`, which must be consecutive.
pub fn inputs_at(archive: &FrameArchive, input_frames: usize, start: usize) -> Result<Tensor<f32>> {
    let (c, s) = (archive.num_channels(), archive.num_static());
    if input_frames == 0 {
        return Err(Error::InvalidArgument("window needs input frames".into()));
    }
    check_span(archive, start, input_frames)?;
    let mut inputs = Vec::with_capacity(input_frames * (c + s) * archive.plane());
    for t in start..start + input_frames {
        for ch in 0..c {
            inputs.extend_from_slice(archive.frame_plane(t, ch));
        }
        for st in 0..s {
            inputs.extend_from_slice(archive.static_plane(st));
        }
    }
    Tensor::new(&[input_frames, c + s, archive.height(), archive.width()], inputs)
}

fn check_span(archive: &FrameArchive, start: usize, len: usize) -> Result<()> {
    if start + len > archive.num_frames() {
        return Err(Error::InvalidArgument(format!(
            "window [{start}, {}) exceeds {} frames",
            start + len,
            archive.num_frames()
        )));
    }
    let ts = &archive.timestamps[start..start + len];
    if ts.windows(2).any(|p| p[1] - p[0] != super::FRAME_STEP_SECONDS) {
        return Err(Error::InvalidArgument(format!("window at {start} spans a gap")));
    }
    Ok(())
}

/// Cut the window beginning at frame `start`.
pub fn window_at(
    archive: &FrameArchive,
    layout: WindowLayout,
    start: usize,
    region: &str,
) -> Result<SampleWindow> {
    let (h, w) = (archive.height(), archive.width());
    if layout.input_frames == 0 || layout.output_frames == 0 {
        return Err(Error::InvalidArgument("window needs input and output frames".into()));
    }
    if layout.target_channel >= archive.num_channels() {
        return Err(Error::InvalidArgument(format!(
            "target channel {} out of range for {} channels",
            layout.target_channel,
            archive.num_channels()
        )));
    }
    check_span(archive, start, layout.length())?;
    let inputs = inputs_at(archive, layout.input_frames, start)?;
    let plane = archive.plane();
    let mut targets = Vec::with_capacity(layout.output_frames * plane);
    let mut mask = Vec::with_capacity(layout.output_frames * plane);
    let first_target = start + layout.input_frames;
    for t in first_target..first_target + layout.output_frames {
        targets.extend_from_slice(archive.frame_plane(t, layout.target_channel));
        mask.extend(archive.mask_plane(t, layout.target_channel).iter().map(|&m| m as f32));
    }
    let tshape = [layout.output_frames, 1, h, w];
    Ok(SampleWindow {
        inputs,
        targets: Tensor::new(&tshape, targets)?,
        target_mask: Tensor::new(&tshape, mask)?,
        region: region.to_string(),
        start,
    })
}

/// Every gapless window of `layout.length()` frames, in start order.
pub fn extract_windows(
    archive: &FrameArchive,
    layout: WindowLayout,
    region: &str,
) -> Result<Vec<SampleWindow>> {
    window_starts(archive, layout.length())?
        .into_iter()
        .map(|s| window_at(archive, layout, s, region))
        .collect()
}
