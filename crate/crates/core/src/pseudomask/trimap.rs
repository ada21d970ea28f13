use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::GrabcutParams;
use crate::dataset::{Point, RecistAnnotation};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrimapLabel {
    DefFg,
    ProbFg,
    ProbBg,
    DefBg,
}

impl TrimapLabel {
    pub fn is_fixed(self) -> bool {
        matches!(self, TrimapLabel::DefFg | TrimapLabel::DefBg)
    }

    /// Initial GrabCut label: foreground for `DefFg` and `ProbFg`.
    pub fn is_fg(self) -> bool {
        matches!(self, TrimapLabel::DefFg | TrimapLabel::ProbFg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    pub labels: Array2<TrimapLabel>,
}

impl Trimap {
    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn def_fg_mask(&self) -> Array2<bool> {
        self.labels.mapv(|l| l == TrimapLabel::DefFg)
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Seeds GrabCut from the two RECIST diameters.
///
/// Pixels within `seed_radius` of either diameter are definite foreground.
/// The RECIST bounding box is grown by `bbox_expand` times its extent on every
/// side; pixels not strictly inside the grown box are definite background.
/// The rest is probable foreground inside the RECIST box and probable
/// background outside it. When nothing is definite background (the grown box
/// covers the image), a `border_margin`-pixel frame is forced to it.
pub fn build_trimap(recist: &RecistAnnotation, shape: (usize, usize), params: &GrabcutParams) -> Result<Trimap> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("empty trimap shape".into()));
    }
    for p in recist.points() {
        let inside = p.is_finite() && p.x >= -0.5 && p.y >= -0.5 && p.x <= w as f64 - 0.5 && p.y <= h as f64 - 0.5;
        if !inside {
            return Err(Error::Invalid(format!(
                "RECIST endpoint ({:.2}, {:.2}) outside {w}x{h} image",
                p.x, p.y
            )));
        }
    }

    let (x0, y0, x1, y1) = recist.bbox();
    let (ex, ey) = (params.bbox_expand * (x1 - x0), params.bbox_expand * (y1 - y0));
    let (gx0, gy0, gx1, gy1) = (x0 - ex, y0 - ey, x1 + ex, y1 + ey);
    let r = params.seed_radius;
    let [l0, l1] = recist.long_axis;
    let [s0, s1] = recist.short_axis;

    let mut labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let p = Point::new(x as f64, y as f64);
        if segment_distance(p, l0, l1) <= r || segment_distance(p, s0, s1) <= r {
            TrimapLabel::DefFg
        } else if !(p.x > gx0 && p.x < gx1 && p.y > gy0 && p.y < gy1) {
            TrimapLabel::DefBg
        } else if p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1 {
            TrimapLabel::ProbFg
        } else {
            TrimapLabel::ProbBg
        }
    });

    // A degenerate seed (both diameters inside one pixel but off-center) may
    // not cover any pixel center; fall back to the nearest pixel.
    if !labels.iter().any(|&l| l == TrimapLabel::DefFg) {
        let c = l0;
        let (yy, xx) = (c.y.round().clamp(0.0, (h - 1) as f64) as usize, c.x.round().clamp(0.0, (w - 1) as f64) as usize);
        labels[[yy, xx]] = TrimapLabel::DefFg;
    }

    if !labels.iter().any(|&l| l == TrimapLabel::DefBg) {
        log::debug!("grown RECIST box covers the image; forcing a {}-px border to background", params.border_margin);
        let m = params.border_margin.max(1);
        for ((y, x), l) in labels.indexed_iter_mut() {
            if y < m || x < m || y + m >= h || x + m >= w {
                *l = TrimapLabel::DefBg;
            }
        }
    }
    if !labels.iter().any(|&l| l == TrimapLabel::DefFg) {
        return Err(Error::Invalid("trimap has no definite-foreground pixel after border fallback".into()));
    }
    if !labels.iter().any(|&l| l == TrimapLabel::DefBg) {
        return Err(Error::Invalid("trimap has no definite-background pixel".into()));
    }
    Ok(Trimap { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross() -> RecistAnnotation {
        RecistAnnotation::new(
            [Point::new(10.0, 20.0), Point::new(30.0, 20.0)],
            [Point::new(20.0, 10.0), Point::new(20.0, 30.0)],
        )
    }

    #[test]
    fn cross_seeds() {
        let params = GrabcutParams {
            seed_radius: 1.0,
            ..Default::default()
        };
        let t = build_trimap(&cross(), (64, 64), &params).unwrap();
        assert_eq!(t.labels[[20, 20]], TrimapLabel::DefFg);
        assert_eq!(t.labels[[0, 0]], TrimapLabel::DefBg);
        // Grown box is (0, 40) open on both axes.
        assert_eq!(t.labels[[35, 35]], TrimapLabel::ProbBg);
        assert_eq!(t.labels[[39, 1]], TrimapLabel::ProbBg);
        assert_eq!(t.labels[[40, 20]], TrimapLabel::DefBg);
        assert_eq!(t.labels[[12, 12]], TrimapLabel::ProbFg);
        assert_eq!(t.labels[[21, 25]], TrimapLabel::DefFg);
        assert_eq!(t.labels[[22, 25]], TrimapLabel::ProbFg);
    }

    #[test]
    fn geometry_matches_direct_evaluation() {
        let params = GrabcutParams::default();
        let t = build_trimap(&cross(), (64, 64), &params).unwrap();
        for ((y, x), &l) in t.labels.indexed_iter() {
            let (xf, yf) = (x as f64, y as f64);
            // Axis-aligned segments: x = 20, y in [10, 30] and y = 20, x in [10, 30].
            let d_vert = (xf - 20.0).hypot((10.0 - yf).max(yf - 30.0).max(0.0));
            let d_horz = (yf - 20.0).hypot((10.0 - xf).max(xf - 30.0).max(0.0));
            let on_axis = d_vert <= 2.0 || d_horz <= 2.0;
            let expected = if on_axis {
                TrimapLabel::DefFg
            } else if !(xf > 0.0 && xf < 40.0 && yf > 0.0 && yf < 40.0) {
                TrimapLabel::DefBg
            } else if (10.0..=30.0).contains(&xf) && (10.0..=30.0).contains(&yf) {
                TrimapLabel::ProbFg
            } else {
                TrimapLabel::ProbBg
            };
            assert_eq!(l, expected, "pixel x={x} y={y}");
        }
    }

    #[test]
    fn degenerate_diameter_is_valid() {
        let p = Point::new(15.0, 15.0);
        let r = RecistAnnotation::new([p, p], [p, p]);
        let params = GrabcutParams {
            seed_radius: 0.0,
            ..Default::default()
        };
        let t = build_trimap(&r, (32, 32), &params).unwrap();
        assert_eq!(t.count(TrimapLabel::DefFg), 1);
        assert_eq!(t.labels[[15, 15]], TrimapLabel::DefFg);
        assert!(t.count(TrimapLabel::DefBg) > 0);
    }

    #[test]
    fn full_image_box_forces_border() {
        let r = RecistAnnotation::new(
            [Point::new(0.0, 0.0), Point::new(31.0, 31.0)],
            [Point::new(31.0, 0.0), Point::new(0.0, 31.0)],
        );
        let t = build_trimap(&r, (32, 32), &GrabcutParams::default()).unwrap();
        assert_eq!(t.labels[[0, 16]], TrimapLabel::DefBg);
        assert_eq!(t.labels[[1, 16]], TrimapLabel::DefBg);
        assert_ne!(t.labels[[2, 16]], TrimapLabel::DefBg);
        assert_eq!(t.labels[[16, 16]], TrimapLabel::DefFg);
    }

    #[test]
    fn endpoint_outside_image_rejected() {
        let r = RecistAnnotation::new(
            [Point::new(-3.0, 0.0), Point::new(10.0, 0.0)],
            [Point::new(5.0, 0.0), Point::new(5.0, 2.0)],
        );
        assert!(build_trimap(&r, (16, 16), &GrabcutParams::default()).is_err());
    }
}
