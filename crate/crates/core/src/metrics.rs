//! Pixel-wise segmentation metrics: recall, precision, Dice, averaged
//! Hausdorff distance (AVD) and volumetric similarity (VS).
//!
//! Degenerate conventions: when both masks are empty every overlap metric is
//! 1; when exactly one is empty the undefined ratios are 0. AVD is undefined
//! for an empty mask and is then left out of the set mean (the number of
//! excluded cases is reported). Standard deviations are population values.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::parallel::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, c.both_empty())
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp, c.both_empty())
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_, c.both_empty())
}

pub fn vs(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    1.0 - (c.fp as f64 - c.fn_ as f64).abs() / den as f64
}

/// Stand-in for "no set pixel"; far above any squared distance on a real image.
const FAR: f64 = 1e12;

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..f.len() {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut dt = mask.mapv(|b| if b { 0.0 } else { FAR });
    for x in 0..w {
        for y in 0..h {
            f[y] = dt[[y, x]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            dt[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = dt[[y, x]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            dt[[y, x]] = out[x];
        }
    }
    dt.mapv_inplace(|d| if d >= FAR / 2.0 { f64::INFINITY } else { d });
    dt
}

fn directed_mean_distance(from: &Array2<bool>, to_dt: &Array2<f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&f, &d) in from.iter().zip(to_dt.iter()) {
        if f {
            sum += d.sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

/// Averaged Hausdorff distance in pixels: the larger of the two directed mean
/// nearest-neighbor distances between the foreground sets. `None` when either
/// mask is empty.
pub fn avd(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    if !pred.iter().any(|&b| b) || !gt.iter().any(|&b| b) {
        return Ok(None);
    }
    let to_gt = directed_mean_distance(pred, &squared_distance_transform(gt));
    let to_pred = directed_mean_distance(gt, &squared_distance_transform(pred));
    Ok(Some(to_gt.max(to_pred)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
    pub avd: Option<f64>,
    pub vs: f64,
}

pub fn evaluate_case(case_id: &str, pred: &Array2<bool>, gt: &Array2<bool>) -> Result<CaseMetrics> {
    let c = confusion(pred, gt)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        recall: recall(&c),
        precision: precision(&c),
        dice: dice(&c),
        avd: avd(pred, gt)?,
        vs: vs(&c),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cases: usize,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub dice: MeanStd,
    pub avd: MeanStd,
    /// Cases whose AVD is undefined (an empty mask).
    pub avd_excluded: usize,
    pub vs: MeanStd,
    pub std_kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_case: Vec<CaseMetrics>,
    pub summary: MetricSummary,
}

/// Per-case metrics plus mean and population standard deviation.
pub fn evaluate_set(cases: &[(String, Array2<bool>, Array2<bool>)], exec: Exec) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Invalid("no cases to evaluate".into()));
    }
    let per_case = exec
        .map(cases, |(id, p, g)| evaluate_case(id, p, g))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        summary: summarize(&per_case),
        per_case,
    })
}

pub fn summarize(per_case: &[CaseMetrics]) -> MetricSummary {
    let avds: Vec<f64> = per_case.iter().filter_map(|c| c.avd).collect();
    MetricSummary {
        cases: per_case.len(),
        recall: MeanStd::of(per_case.iter().map(|c| c.recall)),
        precision: MeanStd::of(per_case.iter().map(|c| c.precision)),
        dice: MeanStd::of(per_case.iter().map(|c| c.dice)),
        avd_excluded: per_case.len() - avds.len(),
        avd: MeanStd::of(avds),
        vs: MeanStd::of(per_case.iter().map(|c| c.vs)),
        std_kind: "population".into(),
    }
}

impl MetricReport {
    /// `case_id,recall,precision,dice,avd,vs`, with `n/a` for undefined AVD.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("case_id,recall,precision,dice,avd,vs\n");
        for c in &self.per_case {
            let avd = c.avd.map(|v| format!("{v}")).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!("{},{},{},{},{},{}\n", c.case_id, c.recall, c.precision, c.dice, avd, c.vs));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let body = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// One-row `mean ± std` table in the usual results layout.
    pub fn table(&self) -> String {
        let s = &self.summary;
        let mut t = format!(
            "{:<14}{:<16}{:<16}{:<16}{:<16}{:<16}\n",
            "Cases", "Rec.↑", "Prec.↑", "Dice↑", "AVD↓", "VS↑"
        );
        t.push_str(&format!(
            "{:<14}{:<16}{:<16}{:<16}{:<16}{:<16}\n",
            s.cases,
            s.recall.to_string(),
            s.precision.to_string(),
            s.dice.to_string(),
            s.avd.to_string(),
            s.vs.to_string()
        ));
        t.push_str(&format!("(population std; AVD excluded for {} case(s) with an empty mask)\n", s.avd_excluded));
        t
    }
}
