//! Lesion records, image preprocessing, cluster-stratified splits and
//! within-cluster pairing.

mod cluster;
pub mod imageio;
mod pairs;
mod preprocess;
mod records;
mod split;

pub use cluster::{fallback_cluster, lesion_descriptor};
pub use pairs::{build_pairs, covering_pairs, LesionPair};
pub use preprocess::{preprocess, window_normalize, GeoTransform, PreprocessConfig, Preprocessed};
pub use records::{load_records, write_records, CSV_HEADER};
pub use split::stratified_split;

use serde::{Deserialize, Serialize};

/// Continuous pixel coordinate; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Long and short lesion diameters as marked by a radiologist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecistAnnotation {
    pub long_axis: [Point; 2],
    pub short_axis: [Point; 2],
}

impl RecistAnnotation {
    pub fn new(long_axis: [Point; 2], short_axis: [Point; 2]) -> Self {
        Self {
            long_axis,
            short_axis,
        }
    }

    pub fn points(&self) -> [Point; 4] {
        [
            self.long_axis[0],
            self.long_axis[1],
            self.short_axis[0],
            self.short_axis[1],
        ]
    }

    pub fn long_len(&self) -> f64 {
        self.long_axis[0].dist(self.long_axis[1])
    }

    pub fn short_len(&self) -> f64 {
        self.short_axis[0].dist(self.short_axis[1])
    }

    /// Checks finiteness and that the long axis is not shorter than the short one.
    pub fn validate(&self) -> Result<(), String> {
        if !self.points().iter().all(|p| p.is_finite()) {
            return Err("non-finite RECIST endpoint".into());
        }
        if self.long_len() + 1e-9 < self.short_len() {
            return Err(format!(
                "long axis ({:.3}) shorter than short axis ({:.3})",
                self.long_len(),
                self.short_len()
            ));
        }
        Ok(())
    }

    /// Inclusive axis-aligned bounding box of the four endpoints:
    /// `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let pts = self.points();
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in pts {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            long_axis: [f(self.long_axis[0]), f(self.long_axis[1])],
            short_axis: [f(self.short_axis[0]), f(self.short_axis[1])],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub recist: RecistAnnotation,
    pub cluster_id: usize,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_clusters: usize,
    pub split_fractions: (f64, f64, f64),
    /// Maximum pairs any single lesion may take part in; `None` is exhaustive.
    pub pairing_cap: Option<usize>,
    pub rng_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_clusters: 200,
            split_fractions: (0.8, 0.1, 0.1),
            pairing_cap: None,
            rng_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let (a, b, c) = self.split_fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(crate::Error::Config(format!(
                "split fractions {:?} must be in [0,1] and sum to 1",
                self.split_fractions
            )));
        }
        if self.num_clusters == 0 {
            return Err(crate::Error::Config("num_clusters must be >= 1".into()));
        }
        if self.pairing_cap == Some(0) {
            return Err(crate::Error::Config("pairing_cap must be >= 1".into()));
        }
        Ok(())
    }
}
