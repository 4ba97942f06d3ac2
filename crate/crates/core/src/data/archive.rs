//! Frame archive files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      "W4CF"
//! version    u32 = 1
//! T C S H W  u32 × 5
//! timestamps u64 × T          seconds, strictly increasing
//! names      (u16 len + UTF-8) × (C + S)   dynamic channels, then static
//! frames     f32 × T·C·H·W    row-major, values in [0, 1]
//! mask       u8  × T·C·H·W    1 = valid, 0 = missing
//! static     f32 × S·H·W
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"W4CF";
pub const ARCHIVE_VERSION: u32 = 1;
/// Spacing of consecutive frames in seconds (15 minutes).
pub const FRAME_STEP_SECONDS: u64 = 900;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameArchive {
    /// `[T, C, H, W]`.
    pub frames: Tensor<f32>,
    /// One byte per frame value, 1 where valid.
    pub mask: Vec<u8>,
    pub timestamps: Vec<u64>,
    pub channel_names: Vec<String>,
    /// `[S, H, W]`.
    pub statics: Tensor<f32>,
    pub static_names: Vec<String>,
}

impl FrameArchive {
    pub fn new(
        frames: Tensor<f32>,
        mask: Vec<u8>,
        timestamps: Vec<u64>,
        channel_names: Vec<String>,
        statics: Tensor<f32>,
        static_names: Vec<String>,
    ) -> Result<Self> {
        let a = Self {
            frames,
            mask,
            timestamps,
            channel_names,
            statics,
            static_names,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_static(&self) -> usize {
        self.statics.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn plane(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channel_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "archive has no channel '{name}' (channels: {})",
                    self.channel_names.join(", ")
                ))
            })
    }

    /// Values of channel `c` in frame `t`.
    pub fn frame_plane(&self, t: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let off = (t * self.num_channels() + c) * p;
        &self.frames.data()[off..off + p]
    }

    pub fn mask_plane(&self, t: usize, c: usize) -> &[u8] {
        let p = self.plane();
        let off = (t * self.num_channels() + c) * p;
        &self.mask[off..off + p]
    }

    pub fn static_plane(&self, s: usize) -> &[f32] {
        let p = self.plane();
        &self.statics.data()[s * p..(s + 1) * p]
    }

    pub fn validate(&self) -> Result<()> {
        let fs = self.frames.shape();
        if fs.len() != 4 {
            return Err(Error::Format(format!("frames must be [T,C,H,W], got {fs:?}")));
        }
        let ss = self.statics.shape();
        if ss.len() != 3 || ss[1..] != fs[2..] {
            return Err(Error::Format(format!(
                "static rasters {ss:?} do not match frame geometry {fs:?}"
            )));
        }
        if self.timestamps.len() != fs[0] {
            return Err(Error::Format(format!(
                "{} timestamps for {} frames",
                self.timestamps.len(),
                fs[0]
            )));
        }
        if self.channel_names.len() != fs[1] || self.static_names.len() != ss[0] {
            return Err(Error::Format("channel name table does not match channel counts".into()));
        }
        if self.mask.len() != self.frames.len() {
            return Err(Error::Format("mask size does not match frames".into()));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Format(format!(
                "timestamps not strictly increasing at frame {}",
                i + 1
            )));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        let in_unit = |v: &f32| (0.0..=1.0).contains(v);
        if !self.frames.data().iter().all(in_unit) {
            return Err(Error::Format("frame values outside [0, 1]".into()));
        }
        if !self.statics.data().iter().all(in_unit) {
            return Err(Error::Format("static values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Frame indices `i` where `timestamps[i] - timestamps[i-1]` is not one step.
    pub fn gap_boundaries(&self) -> Vec<usize> {
        (1..self.timestamps.len())
            .filter(|&i| self.timestamps[i] - self.timestamps[i - 1] != FRAME_STEP_SECONDS)
            .collect()
    }

    /// Maximal runs of frames at exact one-step spacing.
    pub fn gapless_runs(&self) -> Vec<Range<usize>> {
        let n = self.num_frames();
        if n == 0 {
            return Vec::new();
        }
        let mut runs = Vec::new();
        let mut start = 0;
        for b in self.gap_boundaries() {
            runs.push(start..b);
            start = b;
        }
        runs.push(start..n);
        runs
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        let fs = self.frames.shape();
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        for d in [fs[0], fs[1], self.num_static(), fs[2], fs[3]] {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        for &t in &self.timestamps {
            w.write_all(&t.to_le_bytes())?;
        }
        for name in self.channel_names.iter().chain(&self.static_names) {
            write_name(w, name)?;
        }
        write_f32s(w, self.frames.data())?;
        w.write_all(&self.mask)?;
        write_f32s(w, self.statics.data())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("bad archive magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let [t, c, s, h, w] = dims;
        let timestamps = (0..t).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let mut names = (0..c + s).map(|_| read_name(r)).collect::<Result<Vec<_>>>()?;
        let static_names = names.split_off(c);
        let n = t
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("archive dimensions overflow".into()))?;
        let frames = Tensor::new(&[t, c, h, w], read_f32s(r, n)?)?;
        let mut mask = Vec::new();
        r.by_ref().take(n as u64).read_to_end(&mut mask)?;
        if mask.len() != n {
            return Err(Error::Format("file truncated".into()));
        }
        let statics = Tensor::new(&[s, h, w], read_f32s(r, s * h * w)?)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after archive payload".into()));
        }
        Self::new(frames, mask, timestamps, names, statics, static_names)
    }
}

pub(crate) fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(eof)
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    // Grow with the data actually present so corrupt sizes cannot force a
    // huge allocation.
    let want = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut bytes = Vec::new();
    r.by_ref().take(want as u64).read_to_end(&mut bytes)?;
    if bytes.len() != want {
        return Err(Error::Format("file truncated".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Format(format!("name too long: {} bytes", name.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

pub(crate) fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("name is not valid UTF-8".into()))
}
