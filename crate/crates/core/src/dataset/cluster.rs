use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LesionRecord;

/// Descriptor used when precomputed cluster labels are unavailable:
/// `[mean intensity inside the RECIST box, long diameter, short diameter, aspect ratio]`.
pub fn lesion_descriptor(record: &LesionRecord, image: &Array2<f64>) -> [f64; 4] {
    let (h, w) = image.dim();
    let (x0, y0, x1, y1) = record.recist.bbox();
    let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n.saturating_sub(1));
    let (c0, c1) = (clampi(x0, w), clampi(x1, w));
    let (r0, r1) = (clampi(y0, h), clampi(y1, h));
    let crop = image.slice(ndarray::s![r0..=r1, c0..=c1]);
    let mean = crop.mean().unwrap_or(0.0);
    let long = record.recist.long_len();
    let short = record.recist.short_len();
    [mean, long, short, if long > 0.0 { short / long } else { 1.0 }]
}

/// k-means (k-means++ seeding, Lloyd iterations) over z-scored descriptors.
///
/// `k` is reduced to the number of records when there are fewer. Ties go to
/// the lowest cluster index, so identical descriptors share one cluster.
pub fn fallback_cluster(descriptors: &[[f64; 4]], num_clusters: usize, rng_seed: u64) -> Vec<usize> {
    let n = descriptors.len();
    if n == 0 {
        return Vec::new();
    }
    let mut k = num_clusters.max(1);
    if n < k {
        log::warn!("only {n} records for {k} clusters; reducing k to {n}");
        k = n;
    }

    let mut feats: Vec<[f64; 4]> = descriptors.to_vec();
    for d in 0..4 {
        let mean = feats.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let var = feats.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for f in &mut feats {
            f[d] = (f[d] - mean) / sd;
        }
    }
    let dist2 = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centers = vec![feats[rng.random_range(0..n)]];
    let mut nearest: Vec<f64> = feats.iter().map(|f| dist2(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with existing centers.
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
            feats[pick]
        };
        for (m, f) in nearest.iter_mut().zip(&feats) {
            *m = m.min(dist2(f, &next));
        }
        centers.push(next);
    }

    let assign = |centers: &[[f64; 4]]| -> Vec<usize> {
        feats
            .iter()
            .map(|f| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, ctr) in centers.iter().enumerate() {
                    let d = dist2(f, ctr);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut labels = assign(&centers);
    for _ in 0..100 {
        let mut sums = vec![[0.0; 4]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in feats.iter().zip(&labels) {
            counts[l] += 1;
            for d in 0..4 {
                sums[l][d] += f[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..4 {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sse(feats: &[[f64; 4]], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for c in 0..2 {
            let members: Vec<_> = feats.iter().zip(labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..4 {
                let m = members.iter().map(|f| f[d]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|f| (f[d] - m).powi(2)).sum::<f64>();
            }
        }
        total
    }

    #[test]
    fn two_blobs_match_exhaustive_two_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feats = Vec::new();
        for i in 0..10 {
            let base = if i < 5 { 0.0 } else { 50.0 };
            feats.push([
                base + rng.random::<f64>(),
                base + rng.random::<f64>(),
                base * 0.5 + rng.random::<f64>(),
                1.0 + rng.random::<f64>(),
            ]);
        }
        // Oracle: best of all 2^10 bipartitions.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 0u32..(1 << 10) {
            let labels: Vec<usize> = (0..10).map(|i| ((mask >> i) & 1) as usize).collect();
            let s = sse(&feats, &labels);
            if s < best.0 {
                best = (s, mask);
            }
        }
        let oracle: Vec<usize> = (0..10).map(|i| ((best.1 >> i) & 1) as usize).collect();
        let got = fallback_cluster(&feats, 2, 9);
        let same = got == oracle || got.iter().zip(&oracle).all(|(a, b)| a != b);
        assert!(same, "{got:?} vs {oracle:?}");
        assert_ne!(got[0], got[9]);
    }

    #[test]
    fn k_one_and_degenerate_inputs() {
        let feats = vec![[1.0, 2.0, 3.0, 0.5]; 6];
        assert!(fallback_cluster(&feats, 1, 0).iter().all(|&l| l == 0));
        let labels = fallback_cluster(&feats, 2, 0);
        assert!(labels.iter().all(|&l| l == labels[0]));
        assert_eq!(fallback_cluster(&feats[..2], 5, 0).len(), 2);
        assert!(fallback_cluster(&feats[..2], 5, 0).iter().all(|&l| l < 2));
    }

    #[test]
    fn deterministic() {
        let feats: Vec<_> = (0..40).map(|i| [(i % 7) as f64, (i % 3) as f64, i as f64, 0.3]).collect();
        assert_eq!(fallback_cluster(&feats, 4, 5), fallback_cluster(&feats, 4, 5));
    }
}
