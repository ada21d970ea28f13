//! Fully-connected CRF refinement with Gaussian pairwise potentials.
//!
//! Messages are summed exactly over all pixel pairs. Spatial Gaussians are
//! separable, so per-axis offset tables replace most `exp` calls; only the
//! intensity term of the appearance kernel is evaluated per pair.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::parallel::Exec;
use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub w_appearance: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub w_smooth: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_appearance: 10.0,
            theta_alpha: 20.0,
            theta_beta: 0.1,
            w_smooth: 3.0,
            theta_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("crf {name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("w_appearance", self.w_appearance), ("w_smooth", self.w_smooth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("crf {name} must be >= 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("crf iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Pairwise kernel between two pixels, as used by the message sums.
    pub fn kernel(&self, pi: (usize, usize), zi: f64, pj: (usize, usize), zj: f64) -> f64 {
        let dy = pi.0 as f64 - pj.0 as f64;
        let dx = pi.1 as f64 - pj.1 as f64;
        let d2 = dy * dy + dx * dx;
        let dz = zi - zj;
        self.w_appearance
            * (-d2 / (2.0 * self.theta_alpha * self.theta_alpha)
                - dz * dz / (2.0 * self.theta_beta * self.theta_beta))
                .exp()
            + self.w_smooth * (-d2 / (2.0 * self.theta_gamma * self.theta_gamma)).exp()
    }
}

/// Per-pixel two-class distribution, `[background, lesion]`.
pub type Marginal = [f64; 2];

fn gaussian_table(n: usize, theta: f64, weight: f64) -> Vec<f64> {
    (0..n)
        .map(|d| weight * (-((d * d) as f64) / (2.0 * theta * theta)).exp())
        .collect()
}

/// Dense messages `m_i(l) = Σ_{j≠i} k(i,j) Q_j(l)`.
pub fn messages(q: &[Marginal], image: &Array2<f64>, params: &CrfParams, exec: Exec) -> Vec<Marginal> {
    let (h, w) = image.dim();
    let n = h * w;
    let z: Vec<f64> = image.iter().copied().collect();
    let extent = h.max(w);
    let app_y = gaussian_table(extent, params.theta_alpha, params.w_appearance);
    let app_x = gaussian_table(extent, params.theta_alpha, 1.0);
    let sm_y = gaussian_table(extent, params.theta_gamma, params.w_smooth);
    let sm_x = gaussian_table(extent, params.theta_gamma, 1.0);
    let inv_beta = 1.0 / (2.0 * params.theta_beta * params.theta_beta);
    let use_app = params.w_appearance > 0.0;
    let use_sm = params.w_smooth > 0.0;

    exec.map_range(n, |i| {
        let (yi, xi) = (i / w, i % w);
        let zi = z[i];
        let mut m = [0.0f64; 2];
        for yj in 0..h {
            let dy = yi.abs_diff(yj);
            let (ay, sy) = (app_y[dy], sm_y[dy]);
            let row = yj * w;
            for xj in 0..w {
                let j = row + xj;
                if j == i {
                    continue;
                }
                let dx = xi.abs_diff(xj);
                let mut k = 0.0;
                if use_app {
                    let dz = zi - z[j];
                    k += ay * app_x[dx] * (-dz * dz * inv_beta).exp();
                }
                if use_sm {
                    k += sy * sm_x[dx];
                }
                m[0] += k * q[j][0];
                m[1] += k * q[j][1];
            }
        }
        m
    })
}

fn normalize(logits: [f64; 2]) -> Marginal {
    let mx = logits[0].max(logits[1]);
    let e0 = (logits[0] - mx).exp();
    let e1 = (logits[1] - mx).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// One mean-field update under the Potts model.
pub fn mean_field_step(
    q: &[Marginal],
    unary: &[Marginal],
    image: &Array2<f64>,
    params: &CrfParams,
    exec: Exec,
) -> Result<Vec<Marginal>> {
    let n = image.len();
    if q.len() != n || unary.len() != n {
        return Err(Error::Shape(format!(
            "mean-field inputs: q has {}, unary has {}, image has {} pixels",
            q.len(),
            unary.len(),
            n
        )));
    }
    let m = messages(q, image, params, exec);
    Ok(unary
        .iter()
        .zip(&m)
        .map(|(u, m)| normalize([-u[0] - m[1], -u[1] - m[0]]))
        .collect())
}

/// Unary potentials from a lesion probability map.
pub fn unary_from_prob(prob: &Array2<f64>) -> Vec<Marginal> {
    prob.iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            [-(1.0 - p).ln(), -p.ln()]
        })
        .collect()
}

/// Refines a probability map; returns the lesion marginal.
pub fn refine(prob: &Array2<f64>, image: &Array2<f64>, params: &CrfParams) -> Result<Array2<f64>> {
    refine_with(prob, image, params, Exec::default())
}

pub fn refine_with(
    prob: &Array2<f64>,
    image: &Array2<f64>,
    params: &CrfParams,
    exec: Exec,
) -> Result<Array2<f64>> {
    params.validate()?;
    if prob.dim() != image.dim() {
        return Err(Error::Shape(format!(
            "probability map {:?} vs image {:?}",
            prob.dim(),
            image.dim()
        )));
    }
    if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Invalid("probability map values must lie in [0, 1]".into()));
    }
    let unary = unary_from_prob(prob);
    let mut q: Vec<Marginal> = unary.iter().map(|u| normalize([-u[0], -u[1]])).collect();
    for _ in 0..params.iterations {
        q = mean_field_step(&q, &unary, image, params, exec)?;
    }
    let out: Vec<f64> = q.iter().map(|m| m[1]).collect();
    Ok(Array2::from_shape_vec(prob.dim(), out).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_pairwise() -> CrfParams {
        CrfParams { w_appearance: 0.0, w_smooth: 0.0, ..Default::default() }
    }

    #[test]
    fn unary_only_limit_ignores_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>());
        let unary: Vec<Marginal> = (0..35).map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0]).collect();
        let q: Vec<Marginal> = (0..35)
            .map(|_| {
                let a = rng.random::<f64>();
                [a, 1.0 - a]
            })
            .collect();
        let out = mean_field_step(&q, &unary, &image, &zero_pairwise(), Exec::Sequential).unwrap();
        for (o, u) in out.iter().zip(&unary) {
            let z = (-u[0]).exp() + (-u[1]).exp();
            assert!((o[0] - (-u[0]).exp() / z).abs() < 1e-12);
            assert!((o[1] - (-u[1]).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn three_pixel_chain_matches_hand_update() {
        let image = Array2::from_shape_vec((1, 3), vec![0.0, 0.05, 0.3]).unwrap();
        let params = CrfParams {
            w_appearance: 2.0,
            theta_alpha: 1.5,
            theta_beta: 0.2,
            w_smooth: 1.0,
            theta_gamma: 1.0,
            iterations: 1,
        };
        let unary = vec![[0.2, 1.1], [0.7, 0.4], [1.5, 0.1]];
        let q = vec![[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]];
        let out = mean_field_step(&q, &unary, &image, &params, Exec::Sequential).unwrap();

        let z = [0.0, 0.05, 0.3];
        let k = |i: usize, j: usize| {
            let d = i as f64 - j as f64;
            let dz = z[i] - z[j];
            2.0 * (-d * d / (2.0 * 2.25) - dz * dz / (2.0 * 0.04)).exp() + (-d * d / 2.0).exp()
        };
        for i in 0..3 {
            let mut m = [0.0; 2];
            for j in 0..3 {
                if j != i {
                    m[0] += k(i, j) * q[j][0];
                    m[1] += k(i, j) * q[j][1];
                }
            }
            let e0 = (-unary[i][0] - m[1]).exp();
            let e1 = (-unary[i][1] - m[0]).exp();
            assert!((out[i][0] - e0 / (e0 + e1)).abs() < 1e-9, "pixel {i}");
            assert!((out[i][1] - e1 / (e0 + e1)).abs() < 1e-9, "pixel {i}");
        }
    }

    #[test]
    fn uniform_inputs_stay_uniform() {
        let image = Array2::from_elem((8, 8), 0.4);
        let unary = vec![[0.5, 0.5]; 64];
        let q = vec![[0.5, 0.5]; 64];
        let out = mean_field_step(&q, &unary, &image, &CrfParams::default(), Exec::Sequential).unwrap();
        for o in out {
            assert!((o[0] - 0.5).abs() < 1e-12 && (o[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_limit_and_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prob = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
        let image = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
        let params = CrfParams { iterations: 1, ..zero_pairwise() };
        let out = refine(&prob, &image, &params).unwrap();
        for (a, b) in out.iter().zip(prob.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        let prob = Array2::from_elem((10, 10), 0.5);
        let image = Array2::from_elem((10, 10), 0.3);
        let out = refine(&prob, &image, &CrfParams::default()).unwrap();
        let first = out[[0, 0]];
        assert!(out.iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn salt_noise_is_absorbed() {
        let (h, w) = (32, 32);
        let region = Array2::from_shape_fn((h, w), |(y, x)| {
            let (dy, dx) = (y as f64 - 15.5, x as f64 - 13.0);
            dy * dy + dx * dx < 64.0
        });
        let image = region.mapv(|r| if r { 0.8 } else { 0.2 });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prob = region.mapv(|r| {
            let p = if r { 0.8 } else { 0.2 };
            if rng.random::<f64>() < 0.08 {
                1.0 - p
            } else {
                p
            }
        });
        assert!(prob.iter().zip(region.iter()).any(|(p, r)| (*p > 0.5) != *r));
        let out = refine(&prob, &image, &CrfParams::default()).unwrap();
        let mask = out.mapv(|p| p > 0.5);
        assert_eq!(mask, region);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prob = Array2::from_shape_fn((12, 9), |_| rng.random::<f64>());
        let image = Array2::from_shape_fn((12, 9), |_| rng.random::<f64>());
        let params = CrfParams { iterations: 3, ..Default::default() };
        let a = refine_with(&prob, &image, &params, Exec::Sequential).unwrap();
        let b = refine_with(&prob, &image, &params, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_path_matches_direct_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = Array2::from_shape_fn((7, 5), |_| rng.random::<f64>());
        let q: Vec<Marginal> = (0..35)
            .map(|_| {
                let a = rng.random::<f64>();
                [a, 1.0 - a]
            })
            .collect();
        let params = CrfParams { theta_alpha: 2.0, theta_beta: 0.3, ..Default::default() };
        let fast = messages(&q, &image, &params, Exec::Sequential);
        for i in 0..35 {
            let mut m = [0.0; 2];
            for j in 0..35 {
                if i != j {
                    let k = params.kernel((i / 5, i % 5), image.as_slice().unwrap()[i], (j / 5, j % 5), image.as_slice().unwrap()[j]);
                    m[0] += k * q[j][0];
                    m[1] += k * q[j][1];
                }
            }
            assert!((m[0] - fast[i][0]).abs() < 1e-9 && (m[1] - fast[i][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let prob = Array2::from_elem((3, 3), 0.5);
        let image = Array2::from_elem((3, 4), 0.5);
        assert!(refine(&prob, &image, &CrfParams::default()).is_err());
        assert!(mean_field_step(&[[0.5, 0.5]], &[[0.5, 0.5]], &image, &CrfParams::default(), Exec::Sequential).is_err());
    }
}
