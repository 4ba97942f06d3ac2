use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nowcast_core::metrics::round_half_up;
use nowcast_core::Result;

/// `[0, 1]` onto `0..=255`, rounding halves up.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect()
}

/// 255 at or above 0.5, else 0.
pub fn to_threshold(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (round_half_up(f64::from(v)) * 255.0) as u8)
        .collect()
}

/// Binary (P5) portable graymap.
pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}
