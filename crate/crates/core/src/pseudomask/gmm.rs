use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

impl Component {
    fn log_density(&self, z: f64) -> f64 {
        let d = z - self.mean;
        -0.5 * (LN_2PI + self.var.ln() + d * d / self.var)
    }
}

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<Component>,
    pub variance_floor: f64,
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `ln p(z)` under the mixture.
    pub fn log_likelihood(&self, z: f64) -> f64 {
        let mut buf = [0.0f64; 16];
        let terms = self.components.iter().map(|c| {
            if c.weight > 0.0 {
                c.weight.ln() + c.log_density(z)
            } else {
                f64::NEG_INFINITY
            }
        });
        if self.k() <= buf.len() {
            for (b, t) in buf.iter_mut().zip(terms) {
                *b = t;
            }
            log_sum_exp(&buf[..self.k()])
        } else {
            log_sum_exp(&terms.collect::<Vec<_>>())
        }
    }

    pub fn total_log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&z| self.log_likelihood(z)).sum()
    }

    /// Seeds a mixture with k-means++ on the samples and hard assignment.
    fn seed(samples: &[f64], k: usize, rng_seed: u64, floor: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let n = samples.len();
        let mut centers = vec![samples[rng.random_range(0..n)]];
        let mut nearest: Vec<f64> = samples.iter().map(|z| (z - centers[0]).powi(2)).collect();
        while centers.len() < k {
            let total: f64 = nearest.iter().sum();
            let c = if total <= 0.0 {
                centers[0]
            } else {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in nearest.iter().enumerate() {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                samples[pick]
            };
            for (m, z) in nearest.iter_mut().zip(samples) {
                *m = m.min((z - c).powi(2));
            }
            centers.push(c);
        }
        let mut sums = vec![(0usize, 0.0, 0.0); k];
        for &z in samples {
            let mut best = 0;
            for (i, c) in centers.iter().enumerate() {
                if (z - c).abs() < (z - centers[best]).abs() {
                    best = i;
                }
            }
            sums[best].0 += 1;
            sums[best].1 += z;
            sums[best].2 += z * z;
        }
        let components = sums
            .iter()
            .zip(&centers)
            .map(|(&(cnt, s, s2), &c)| {
                if cnt == 0 {
                    Component { weight: 0.0, mean: c, var: floor }
                } else {
                    let mean = s / cnt as f64;
                    Component {
                        weight: cnt as f64 / n as f64,
                        mean,
                        var: (s2 / cnt as f64 - mean * mean).max(floor),
                    }
                }
            })
            .collect();
        GmmModel {
            components,
            variance_floor: floor,
        }
    }

    /// Runs EM from the current parameters and returns the data
    /// log-likelihood before the first step and after each step. The sequence
    /// is non-decreasing: the floored variance update is still the constrained
    /// maximizer of the expected complete-data likelihood.
    pub fn em(&mut self, samples: &[f64], max_iters: usize, rel_tol: f64) -> Vec<f64> {
        let k = self.k();
        let n = samples.len();
        let mut trace = vec![self.total_log_likelihood(samples)];
        let mut resp = vec![0.0; n * k];
        for _ in 0..max_iters {
            for (z, r) in samples.iter().zip(resp.chunks_exact_mut(k)) {
                for (lp, c) in r.iter_mut().zip(&self.components) {
                    *lp = if c.weight > 0.0 {
                        c.weight.ln() + c.log_density(*z)
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                let norm = log_sum_exp(r);
                r.iter_mut().for_each(|v| *v = (*v - norm).exp());
            }
            for (j, c) in self.components.iter_mut().enumerate() {
                let mut nk = 0.0;
                let mut sz = 0.0;
                for (z, r) in samples.iter().zip(resp.chunks_exact(k)) {
                    nk += r[j];
                    sz += r[j] * z;
                }
                if nk <= 0.0 {
                    c.weight = 0.0;
                    c.var = self.variance_floor;
                    continue;
                }
                let mean = sz / nk;
                let mut sv = 0.0;
                for (z, r) in samples.iter().zip(resp.chunks_exact(k)) {
                    sv += r[j] * (z - mean) * (z - mean);
                }
                c.weight = nk / n as f64;
                c.mean = mean;
                c.var = (sv / nk).max(self.variance_floor);
            }
            let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
            self.components.iter_mut().for_each(|c| c.weight /= wsum);

            let ll = self.total_log_likelihood(samples);
            let prev = *trace.last().unwrap();
            trace.push(ll);
            if (ll - prev).abs() <= rel_tol * prev.abs().max(1.0) {
                break;
            }
        }
        trace
    }
}

/// Fits a `k`-component mixture by seeded k-means++ initialization followed by EM.
/// `k` is reduced when there are fewer samples than components.
pub fn fit_gmm(samples: &[f64], k: usize, rng_seed: u64, variance_floor: f64) -> Result<GmmModel> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot fit a mixture to an empty sample set".into()));
    }
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    let k = k.min(samples.len());
    let mut model = GmmModel::seed(samples, k, rng_seed, variance_floor);
    model.em(samples, 200, 1e-10);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_clusters_recovered() {
        let s = [0.0, 0.1, -0.1, 5.0, 4.9, 5.1];
        // Oracle: best 2-partition by within-part squared error over all 2^6 splits.
        let mut best = (f64::INFINITY, (0.0, 0.0));
        for mask in 1u32..63 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = vec![];
                let mut b = vec![];
                for (i, &z) in s.iter().enumerate() {
                    if mask >> i & 1 == 1 { a.push(z) } else { b.push(z) }
                }
                (a, b)
            };
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (mean(&a), mean(&b));
            let e: f64 = a.iter().map(|z| (z - ma).powi(2)).sum::<f64>() + b.iter().map(|z| (z - mb).powi(2)).sum::<f64>();
            if e < best.0 {
                best = (e, (ma.min(mb), ma.max(mb)));
            }
        }
        let g = fit_gmm(&s, 2, 1, 1e-6).unwrap();
        let mut means: Vec<f64> = g.components.iter().map(|c| c.mean).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] - best.1 .0).abs() < 0.05, "{means:?}");
        assert!((means[1] - best.1 .1).abs() < 0.05, "{means:?}");
        let wsum: f64 = g.components.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_samples_hit_floor() {
        let g = fit_gmm(&[0.3; 20], 2, 0, 1e-6).unwrap();
        for c in &g.components {
            assert!(c.mean.is_finite() && c.var.is_finite() && c.weight.is_finite());
            assert_eq!(c.var, 1e-6);
            if c.weight > 0.0 {
                assert!((c.mean - 0.3).abs() < 1e-12);
            }
        }
        assert!(g.log_likelihood(0.3).is_finite());
    }

    #[test]
    fn single_component_closed_form() {
        let s = [1.0, 2.0, 4.0, 7.0];
        let g = fit_gmm(&s, 1, 0, 1e-6).unwrap();
        assert!((g.components[0].mean - 3.5).abs() < 1e-12);
        assert!((g.components[0].var - 5.25).abs() < 1e-12);
        assert_eq!(g.components[0].weight, 1.0);
    }

    #[test]
    fn k_reduced_and_empty_rejected() {
        assert_eq!(fit_gmm(&[1.0, 2.0], 5, 0, 1e-6).unwrap().k(), 2);
        assert!(fit_gmm(&[], 2, 0, 1e-6).is_err());
    }

    proptest::proptest! {
        #[test]
        fn em_log_likelihood_non_decreasing(
            samples in proptest::collection::vec(-3.0f64..3.0, 5..80),
            k in 1usize..6,
            seed in 0u64..100,
        ) {
            let k = k.min(samples.len());
            let mut g = GmmModel::seed(&samples, k, seed, 1e-6);
            let trace = g.em(&samples, 50, 0.0);
            for w in trace.windows(2) {
                proptest::prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
            for c in &g.components {
                proptest::prop_assert!(c.var >= 1e-6);
            }
        }
    }
}
