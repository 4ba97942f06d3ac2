use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical range and missing-value marker of one raw channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Raw value marking a missing pixel. NaN raw values are always missing.
    pub sentinel: Option<f64>,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, min: f64, max: f64, sentinel: Option<f64>) -> Result<Self> {
        let s = Self {
            name: name.into(),
            min,
            max,
            sentinel,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.min.is_finite() || !self.max.is_finite() || self.min == self.max {
            return Err(Error::InvalidArgument(format!(
                "channel '{}' needs distinct finite min and max, got {} and {}",
                self.name, self.min, self.max
            )));
        }
        Ok(())
    }

    fn is_missing(&self, v: f64) -> bool {
        v.is_nan() || self.sentinel == Some(v)
    }
}

/// Affine map of raw values onto [0, 1] (clipped), with missing pixels set to
/// value 0 and mask 0.
pub fn normalize(raw: &[f64], spec: &ChannelSpec) -> Result<(Vec<f32>, Vec<u8>)> {
    spec.validate()?;
    let span = spec.max - spec.min;
    Ok(raw
        .iter()
        .map(|&v| {
            if spec.is_missing(v) {
                (0.0, 0)
            } else {
                (((v - spec.min) / span).clamp(0.0, 1.0) as f32, 1)
            }
        })
        .unzip())
}

/// Inverse of [`normalize`] on valid pixels; masked pixels become the sentinel
/// (NaN without one).
pub fn denormalize(values: &[f32], mask: &[u8], spec: &ChannelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if values.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} values with {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    let span = spec.max - spec.min;
    Ok(values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if m == 0 {
                spec.sentinel.unwrap_or(f64::NAN)
            } else {
                spec.min + v as f64 * span
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_maps_to_half() {
        let spec = ChannelSpec::new("temperature", 200.0, 320.0, Some(-999.0)).unwrap();
        let (v, m) = normalize(&[260.0, -999.0, 200.0, 320.0], &spec).unwrap();
        assert_eq!(v, vec![0.5, 0.0, 0.0, 1.0]);
        assert_eq!(m, vec![1, 0, 1, 1]);
    }

    #[test]
    fn degenerate_range_is_an_error() {
        assert!(ChannelSpec::new("x", 1.0, 1.0, None).is_err());
    }

    #[test]
    fn round_trip_on_valid_pixels() {
        let spec = ChannelSpec::new("t", 200.0, 320.0, Some(-1.0)).unwrap();
        let raw = [201.25, 250.0, -1.0, 319.5];
        let (v, m) = normalize(&raw, &spec).unwrap();
        let back = denormalize(&v, &m, &spec).unwrap();
        for i in [0, 1, 3] {
            assert!((back[i] - raw[i]).abs() < 1e-4, "{} vs {}", back[i], raw[i]);
        }
        assert_eq!(back[2], -1.0);
    }
}
