//! Synthetic CT-like lesion phantoms with analytic ground truth.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Point, RecistAnnotation};

/// An elliptical lesion on a flat, noisy background. Intensities are in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub center: Point,
    /// `(semi-major, semi-minor)` in pixels.
    pub semi_axes: (f64, f64),
    /// Orientation of the major axis, radians.
    pub angle: f64,
    pub fg_hu: f64,
    pub bg_hu: f64,
    pub noise_sd: f64,
    /// RECIST endpoints sit this far inside the lesion boundary.
    pub recist_inset: f64,
}

impl PhantomSpec {
    pub fn disk(size: usize, center: Point, radius: f64) -> Self {
        Self {
            height: size,
            width: size,
            center,
            semi_axes: (radius, radius),
            angle: 0.0,
            fg_hu: 200.0,
            bg_hu: 50.0,
            noise_sd: 10.0,
            recist_inset: 0.5,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.x, y - self.center.y);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }

    /// Analytic mask evaluated at pixel centers.
    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| self.contains(x as f64, y as f64))
    }

    pub fn recist(&self) -> RecistAnnotation {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let a = (self.semi_axes.0 - self.recist_inset).max(0.0);
        let b = (self.semi_axes.1 - self.recist_inset).max(0.0);
        let p = self.center;
        RecistAnnotation::new(
            [Point::new(p.x - a * c, p.y - a * s), Point::new(p.x + a * c, p.y + a * s)],
            [Point::new(p.x + b * s, p.y - b * c), Point::new(p.x - b * s, p.y + b * c)],
        )
    }

    pub fn render<R: Rng + ?Sized>(&self, rng: &mut R) -> Phantom {
        let mask = self.mask();
        let noise = Normal::new(0.0, self.noise_sd.max(0.0)).expect("valid sd");
        let image = mask.mapv(|inside| {
            let base = if inside { self.fg_hu } else { self.bg_hu };
            base + if self.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 }
        });
        Phantom {
            image,
            mask,
            recist: self.recist(),
            spec: *self,
        }
    }

    /// Random disk or ellipse fully inside the image with at least `margin`
    /// pixels of background around it.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize, radius: (f64, f64), margin: f64) -> Self {
        let a = rng.random_range(radius.0..=radius.1);
        let ratio = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.6..1.0) };
        let b = a * ratio;
        let lo = a + margin;
        let hi = (size as f64 - 1.0 - a - margin).max(lo);
        let center = Point::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        Self {
            semi_axes: (a, b),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            ..Self::disk(size, center, a)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub mask: Array2<bool>,
    pub recist: RecistAnnotation,
    pub spec: PhantomSpec,
}
