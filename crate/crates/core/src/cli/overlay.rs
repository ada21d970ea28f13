use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::dataset::window_normalize;
use crate::{Error, Result};

const PRED: Rgb<u8> = Rgb([255, 0, 0]);
const GT: Rgb<u8> = Rgb([0, 255, 0]);

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
pub fn contour(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || !mask[[y - 1, x]]
            || !mask[[y + 1, x]]
            || !mask[[y, x - 1]]
            || !mask[[y, x + 1]]
    })
}

/// Windowed grayscale image with the prediction contour in red, then the
/// ground-truth contour in green on top.
pub fn render_overlay(
    image_hu: &Array2<f64>,
    window: (f64, f64),
    pred: Option<&Array2<bool>>,
    gt: Option<&Array2<bool>>,
) -> Result<RgbImage> {
    let (h, w) = image_hu.dim();
    for m in [pred, gt].into_iter().flatten() {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("mask is {:?} but image is {:?}", m.dim(), (h, w))));
        }
    }
    let gray = window_normalize(image_hu, window);
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (gray[[y as usize, x as usize]] * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for (mask, color) in [(pred, PRED), (gt, GT)] {
        if let Some(m) = mask {
            for ((y, x), &on) in contour(m).indexed_iter() {
                if on {
                    out.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_leaves_image_alone() {
        let img = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64 * 5.0 - 100.0);
        let plain = render_overlay(&img, (-175.0, 275.0), None, None).unwrap();
        let empty = Array2::from_elem((8, 8), false);
        let with = render_overlay(&img, (-175.0, 275.0), Some(&empty), Some(&empty)).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn full_mask_draws_border_ring() {
        let img = Array2::zeros((6, 5));
        let full = Array2::from_elem((6, 5), true);
        let out = render_overlay(&img, (-1.0, 1.0), Some(&full), None).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let border = x == 0 || y == 0 || x == 4 || y == 5;
            assert_eq!(*p == PRED, border, "({x},{y})");
        }
    }

    #[test]
    fn ground_truth_drawn_last() {
        let img = Array2::zeros((5, 5));
        let m = Array2::from_shape_fn((5, 5), |(y, x)| (1..4).contains(&y) && (1..4).contains(&x));
        let out = render_overlay(&img, (-1.0, 1.0), Some(&m), Some(&m)).unwrap();
        assert_eq!(*out.get_pixel(1, 1), GT);
        assert_eq!(*out.get_pixel(2, 2), Rgb([128, 128, 128]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let img = Array2::zeros((5, 5));
        let m = Array2::from_elem((4, 5), true);
        assert!(render_overlay(&img, (-1.0, 1.0), Some(&m), None).is_err());
    }
}
