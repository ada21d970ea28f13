//! Weakly-supervised lesion co-segmentation from RECIST marks.
//!
//! The pipeline stages are:
//!
//! 1. **dataset** – lesion records, HU windowing and padded resizing,
//!    cluster-stratified patient-level splits, within-cluster pairing.
//! 2. **pseudomask** – trimap seeding from the RECIST diameters and GrabCut
//!    (1-D GMM appearance models + max-flow graph cuts).
//! 3. **cosegnet** – Siamese dilated encoder, pluggable channel/spatial
//!    attention, two decoder variants; built on the reverse-mode `nn` core.
//! 4. **training** – pair BCE loss, SGD with momentum and poly decay, Adam.
//! 5. **densecrf** – fully-connected CRF mean-field refinement.
//! 6. **metrics** – recall, precision, Dice, AVD and VS with set summaries.
//!
//! Data-parallel loops go through [`parallel::Exec`]; without the `parallel`
//! feature they run sequentially with identical results.

pub mod cli;
pub mod config;
pub mod cosegnet;
pub mod dataset;
pub mod densecrf;
mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod phantom;
pub mod pseudomask;
pub mod resample;
pub mod training;

pub use error::{Error, Result};
