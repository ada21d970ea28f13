//! RECIST-seeded pseudo-masks: trimap seeding, 1-D Gaussian mixtures,
//! max-flow graph cuts and the GrabCut iteration that ties them together.

mod gmm;
mod grabcut;
mod maxflow;
mod trimap;

pub use gmm::{fit_gmm, Component, GmmModel};
pub use grabcut::{grabcut_energy, grabcut_iterate, GrabcutOutcome};
pub use maxflow::{cut_capacity, max_flow, FlowNetwork, MinCut};
pub use trimap::{build_trimap, Trimap, TrimapLabel};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess, GeoTransform, PreprocessConfig, RecistAnnotation};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GrabcutParams {
    pub gmm_components: usize,
    /// Pairwise smoothness strength.
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop once fewer than this fraction of pixels change label.
    pub convergence_tol: f64,
    /// Pixels within this distance (px) of a diameter are definite foreground.
    pub seed_radius: f64,
    /// Growth of the RECIST box on each side, as a fraction of its extent.
    pub bbox_expand: f64,
    /// Width of the forced background frame when the grown box covers the image.
    pub border_margin: usize,
    pub variance_floor: f64,
    /// EM steps per mixture refit after the first iteration.
    pub em_iters: usize,
    pub rng_seed: u64,
}

impl Default for GrabcutParams {
    fn default() -> Self {
        Self {
            gmm_components: 5,
            gamma: 50.0,
            max_iters: 5,
            convergence_tol: 0.001,
            seed_radius: 2.0,
            bbox_expand: 0.5,
            border_margin: 2,
            variance_floor: 1e-6,
            em_iters: 20,
            rng_seed: 0,
        }
    }
}

impl GrabcutParams {
    pub fn validate(&self) -> Result<()> {
        if self.gmm_components == 0 {
            return Err(Error::Config("gmm_components must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if !(self.bbox_expand > 0.0) {
            return Err(Error::Config("bbox_expand must be > 0".into()));
        }
        if !(self.seed_radius >= 0.0) || !(self.variance_floor > 0.0) {
            return Err(Error::Config("seed_radius must be >= 0 and variance_floor > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PseudoMask {
    /// Mask at `target_size × target_size`.
    pub mask: Array2<bool>,
    pub transform: GeoTransform,
    pub outcome: GrabcutOutcome,
}

/// Preprocesses a CT slice (HU), maps the RECIST marks through the same
/// geometric transform, and runs GrabCut from the resulting trimap.
pub fn generate_pseudo_mask(
    image_hu: &Array2<f64>,
    recist: &RecistAnnotation,
    cfg: &PreprocessConfig,
    params: &GrabcutParams,
) -> Result<PseudoMask> {
    let pre = preprocess(image_hu, cfg)?;
    let (h, w) = image_hu.dim();
    for p in recist.points() {
        if !(p.x >= -0.5 && p.y >= -0.5 && p.x <= w as f64 - 0.5 && p.y <= h as f64 - 0.5) {
            return Err(Error::Invalid(format!(
                "RECIST endpoint ({:.2}, {:.2}) outside {w}x{h} image",
                p.x, p.y
            )));
        }
    }
    let mapped = pre.transform.map_recist(recist);
    let trimap = build_trimap(&mapped, pre.image.dim(), params)?;
    let outcome = grabcut_iterate(&pre.image, &trimap, params)?;
    Ok(PseudoMask {
        mask: outcome.mask.clone(),
        transform: pre.transform,
        outcome,
    })
}
