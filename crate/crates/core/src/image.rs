use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the channels of an [`ImageGrid`] mean, and therefore their range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Semantics {
    Rgb,
    Xyz,
    Mask,
}

impl Semantics {
    pub fn channels(self) -> usize {
        match self {
            Semantics::Rgb | Semantics::Xyz => 3,
            Semantics::Mask => 1,
        }
    }

    pub fn range(self) -> (f32, f32) {
        match self {
            Semantics::Rgb | Semantics::Mask => (0.0, 1.0),
            Semantics::Xyz => (-1.0, 1.0),
        }
    }
}

/// `height × width × channels` grid of floats, stored row-major with
/// interleaved channels. Row 0 corresponds to `v ∈ [0, 1/height)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub semantics: Semantics,
    pub data: Vec<f32>,
}

impl ImageGrid {
    /// Validating constructor.
    pub fn new(height: usize, width: usize, semantics: Semantics, data: Vec<f32>) -> Result<Self> {
        let img = Self::unchecked(height, width, semantics, data)?;
        img.validate()?;
        Ok(img)
    }

    /// Checks only the length; used for decoder output that may leave the
    /// declared range until it is persisted.
    pub fn unchecked(height: usize, width: usize, semantics: Semantics, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * semantics.channels() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{} image needs {} values, got {}",
                semantics.channels(),
                height * width * semantics.channels(),
                data.len()
            )));
        }
        Ok(Self { height, width, semantics, data })
    }

    pub fn filled(height: usize, width: usize, semantics: Semantics, value: &[f32]) -> Self {
        assert_eq!(value.len(), semantics.channels());
        let data = value.iter().copied().cycle().take(height * width * value.len()).collect();
        Self { height, width, semantics, data }
    }

    pub fn zeros(height: usize, width: usize, semantics: Semantics) -> Self {
        Self { height, width, semantics, data: vec![0.0; height * width * semantics.channels()] }
    }

    pub fn channels(&self) -> usize {
        self.semantics.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.semantics.range();
        for (i, v) in self.data.iter().enumerate() {
            let ok = match self.semantics {
                Semantics::Mask => *v == 0.0 || *v == 1.0,
                _ => v.is_finite() && *v >= lo && *v <= hi,
            };
            if !ok {
                return Err(Error::OutOfRange(format!(
                    "{:?} image value {v} at index {i} outside its declared range",
                    self.semantics
                )));
            }
        }
        Ok(())
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let c = self.channels();
        &self.data[(y * self.width + x) * c..][..c]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let c = self.channels();
        &mut self.data[(y * self.width + x) * c..][..c]
    }

    pub fn same_size(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy with every value clamped into the declared range (masks are
    /// thresholded at 0.5).
    pub fn clamped(&self) -> ImageGrid {
        let (lo, hi) = self.semantics.range();
        let data = self
            .data
            .iter()
            .map(|v| match self.semantics {
                Semantics::Mask => {
                    if *v >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ if v.is_nan() => lo,
                _ => v.clamp(lo, hi),
            })
            .collect();
        ImageGrid { height: self.height, width: self.width, semantics: self.semantics, data }
    }

    /// Per-pixel select: `self` where `mask == 1`, `fill` elsewhere.
    pub fn composite(&self, mask: &ImageGrid, fill: &[f32]) -> Result<ImageGrid> {
        if !self.same_size(mask) || mask.semantics != Semantics::Mask {
            return Err(Error::Shape("composite needs a mask of equal size".into()));
        }
        let c = self.channels();
        let mut out = self.clone();
        for (i, m) in mask.data.iter().enumerate() {
            if *m < 0.5 {
                out.data[i * c..(i + 1) * c].copy_from_slice(fill);
            }
        }
        Ok(out)
    }

    /// 8-bit preview. Position maps are remapped from `[-1, 1]` to `[0, 1]`.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = self.clamped();
        let to8 = |v: f32| -> u8 {
            let v = if self.semantics == Semantics::Xyz { 0.5 * (v + 1.0) } else { v };
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        let bytes: Vec<u8> = img.data.iter().map(|v| to8(*v)).collect();
        let color = if self.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(enc, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }
}
