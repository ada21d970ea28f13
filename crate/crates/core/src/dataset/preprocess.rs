use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Point, RecistAnnotation};
use crate::resample::linear_taps;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Hounsfield window `(low, high)`; intensities are clipped to it and
    /// mapped affinely onto `[0, 1]`.
    pub hu_window: (f64, f64),
    /// Normalized value used when padding non-square inputs.
    pub pad_value: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 128,
            hu_window: (-175.0, 275.0),
            pad_value: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be > 0".into()));
        }
        let (lo, hi) = self.hu_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "degenerate HU window ({lo}, {hi}): low must be < high"
            )));
        }
        Ok(())
    }
}

/// Center-pad to square then resize to `target × target`, expressed on
/// continuous pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub height: usize,
    pub width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub side: usize,
    pub target: usize,
}

impl GeoTransform {
    pub fn new(height: usize, width: usize, target: usize) -> Self {
        let side = height.max(width);
        Self {
            height,
            width,
            pad_top: (side - height) / 2,
            pad_left: (side - width) / 2,
            side,
            target,
        }
    }

    pub fn scale(&self) -> f64 {
        self.target as f64 / self.side as f64
    }

    pub fn forward(&self, p: Point) -> Point {
        let s = self.scale();
        Point::new(
            (p.x + self.pad_left as f64 + 0.5) * s - 0.5,
            (p.y + self.pad_top as f64 + 0.5) * s - 0.5,
        )
    }

    pub fn inverse(&self, p: Point) -> Point {
        let s = self.scale();
        Point::new(
            (p.x + 0.5) / s - 0.5 - self.pad_left as f64,
            (p.y + 0.5) / s - 0.5 - self.pad_top as f64,
        )
    }

    pub fn map_recist(&self, r: &RecistAnnotation) -> RecistAnnotation {
        r.map(|p| self.forward(p))
    }

    /// Pads with `pad_value` and resizes bilinearly.
    pub fn warp(&self, img: &Array2<f64>, pad_value: f64) -> Array2<f64> {
        assert_eq!(img.dim(), (self.height, self.width), "transform/image shape mismatch");
        let mut square = Array2::from_elem((self.side, self.side), pad_value);
        square
            .slice_mut(ndarray::s![
                self.pad_top..self.pad_top + self.height,
                self.pad_left..self.pad_left + self.width
            ])
            .assign(img);
        resize_bilinear(&square, self.target, self.target)
    }

    /// Warps a binary mask; a pixel is set if its interpolated coverage is at least one half.
    pub fn warp_mask(&self, mask: &Array2<bool>) -> Array2<bool> {
        let f = mask.mapv(|b| if b { 1.0 } else { 0.0 });
        self.warp(&f, 0.0).mapv(|v| v >= 0.5)
    }
}

pub fn resize_bilinear(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    // Rows first, then columns.
    let mut tmp = Array2::zeros((out_h, w));
    for (oy, t) in ty.iter().enumerate() {
        for x in 0..w {
            tmp[[oy, x]] = (1.0 - t.w) * img[[t.lo, x]] + t.w * img[[t.hi, x]];
        }
    }
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        for (ox, t) in tx.iter().enumerate() {
            out[[oy, ox]] = (1.0 - t.w) * tmp[[oy, t.lo]] + t.w * tmp[[oy, t.hi]];
        }
    }
    out
}

/// Clips HU values to the window and maps them onto `[0, 1]`.
pub fn window_normalize(img: &Array2<f64>, window: (f64, f64)) -> Array2<f64> {
    let (lo, hi) = window;
    img.mapv(|v| (v.clamp(lo, hi) - lo) / (hi - lo))
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: Array2<f64>,
    pub transform: GeoTransform,
}

pub fn preprocess(image: &Array2<f64>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let transform = GeoTransform::new(h, w, cfg.target_size);
    let normalized = window_normalize(image, cfg.hu_window);
    Ok(Preprocessed {
        image: transform.warp(&normalized, cfg.pad_value),
        transform,
    })
}
