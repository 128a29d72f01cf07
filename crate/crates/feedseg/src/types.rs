//! Shared domain value types. All of these are immutable after construction
//! and safe to share across threads.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// A normalized RGB image, channel-first `(3, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Contract(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Contract("image has empty spatial extent".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Contract("image values must be finite in [0, 1]".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// 8-bit grayscale via the usual luminance weights.
    pub fn to_gray_u8(&self) -> Array2<u8> {
        let (_, h, w) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let l = 0.299 * self.data[[0, y, x]]
                + 0.587 * self.data[[1, y, x]]
                + 0.114 * self.data[[2, y, x]];
            (l * 255.0).round().clamp(0.0, 255.0) as u8
        })
    }
}

/// A binary mask in the canonical (un-augmented) image frame.
pub type BinaryMask = Array2<u8>;

/// Per-sample persistent feedback mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub stem: String,
    pub mask: BinaryMask,
    /// Epoch whose refresh produced this mask; -1 for the Otsu seed.
    pub epoch_written: i64,
}

impl MaskState {
    pub fn new(stem: String, mask: BinaryMask, epoch_written: i64) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Contract(format!(
                "mask for {stem} must be strictly binary"
            )));
        }
        Ok(MaskState {
            stem,
            mask,
            epoch_written,
        })
    }
}

/// Polyp count and size flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PolypAttributes {
    pub many: bool,
    pub small: bool,
    pub medium: bool,
    pub large: bool,
}

impl PolypAttributes {
    pub const EMPTY: PolypAttributes = PolypAttributes {
        many: false,
        small: false,
        medium: false,
        large: false,
    };

    pub fn any_size(&self) -> bool {
        self.small || self.medium || self.large
    }
}

/// One dataset sample: stem id, canonical image and ground-truth mask,
/// derived attributes and split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub stem: String,
    pub image_path: std::path::PathBuf,
    pub mask_path: std::path::PathBuf,
    pub attributes: PolypAttributes,
    pub split: Split,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn image_tensor_rejects_out_of_range() {
        let mut a = Array3::zeros((3, 4, 4));
        a[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(a).is_err());
        let ok = Array3::from_elem((3, 4, 4), 0.5);
        assert!(ImageTensor::new(ok).is_ok());
    }

    #[test]
    fn gray_conversion_uses_luminance_weights() {
        let mut a = Array3::zeros((3, 1, 1));
        a[[0, 0, 0]] = 1.0; // pure red
        let img = ImageTensor::new(a).unwrap();
        assert_eq!(img.to_gray_u8()[[0, 0]], (0.299f32 * 255.0).round() as u8);
    }

    #[test]
    fn mask_state_requires_binary_values() {
        let mut m = Array2::zeros((2, 2));
        m[[0, 0]] = 2;
        assert!(MaskState::new("a".into(), m, -1).is_err());
    }
}
