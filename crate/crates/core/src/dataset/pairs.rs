use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetConfig, LesionRecord, Split};

/// Unordered lesion pair stored canonically with `a <= b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LesionPair {
    pub a: String,
    pub b: String,
}

impl LesionPair {
    pub fn new(x: &str, y: &str) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        Self {
            a: a.to_string(),
            b: b.to_string(),
        }
    }
}

fn groups<'a>(records: &'a [LesionRecord], split: Split) -> BTreeMap<usize, Vec<&'a str>> {
    let mut g: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        g.entry(r.cluster_id).or_default().push(&r.lesion_id);
    }
    for ids in g.values_mut() {
        ids.sort_unstable();
        ids.dedup();
    }
    g
}

/// All within-cluster pairs of `split`, optionally capped per lesion.
///
/// Without a cap every unordered pair is produced. With a cap, candidate pairs
/// are visited in a seeded random order and kept while both members are under
/// the cap.
pub fn build_pairs(records: &[LesionRecord], split: Split, cfg: &DatasetConfig) -> Vec<LesionPair> {
    let mut out = Vec::new();
    for (cluster, ids) in groups(records, split) {
        let mut candidates = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                candidates.push((i, j));
            }
        }
        if let Some(cap) = cfg.pairing_cap {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.rng_seed ^ (cluster as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
            );
            candidates.shuffle(&mut rng);
            let mut used = vec![0usize; ids.len()];
            candidates.retain(|&(i, j)| {
                if used[i] < cap && used[j] < cap {
                    used[i] += 1;
                    used[j] += 1;
                    true
                } else {
                    false
                }
            });
            candidates.sort_unstable();
        }
        out.extend(candidates.into_iter().map(|(i, j)| LesionPair::new(ids[i], ids[j])));
    }
    out
}

/// A small pair list in which every lesion of `split` appears at least once:
/// within each cluster, lesion `i` is paired with lesion `i + 1` (cyclically).
/// Singleton clusters pair a lesion with itself.
pub fn covering_pairs(records: &[LesionRecord], split: Split) -> Vec<LesionPair> {
    let mut out = Vec::new();
    for ids in groups(records, split).into_values() {
        match ids.len() {
            1 => out.push(LesionPair::new(ids[0], ids[0])),
            2 => out.push(LesionPair::new(ids[0], ids[1])),
            n => {
                let mut i = 0;
                while i < n {
                    out.push(LesionPair::new(ids[i], ids[(i + 1) % n]));
                    i += 2;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Point, RecistAnnotation};
    use std::collections::{HashMap, HashSet};

    fn recs(sizes: &[usize]) -> Vec<LesionRecord> {
        let mut out = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                out.push(LesionRecord {
                    lesion_id: format!("c{c}l{k:03}"),
                    patient_id: format!("p{c}_{k}"),
                    image_path: String::new(),
                    recist: RecistAnnotation::new(
                        [Point::new(0.0, 0.0), Point::new(2.0, 0.0)],
                        [Point::new(1.0, -0.5), Point::new(1.0, 0.5)],
                    ),
                    cluster_id: c,
                    split: Split::Train,
                });
            }
        }
        out
    }

    fn n_choose_2(n: usize) -> usize {
        n * n.saturating_sub(1) / 2
    }

    #[test]
    fn exhaustive_counts() {
        let cfg = DatasetConfig::default();
        assert_eq!(build_pairs(&recs(&[3]), Split::Train, &cfg).len(), 3);
        assert_eq!(build_pairs(&recs(&[1]), Split::Train, &cfg).len(), 0);
        let sizes = [5, 5, 5, 5];
        let expected: usize = sizes.iter().map(|&n| n_choose_2(n)).sum();
        assert_eq!(expected, 40);
        assert_eq!(build_pairs(&recs(&sizes), Split::Train, &cfg).len(), expected);
        assert!(build_pairs(&recs(&sizes), Split::Val, &cfg).is_empty());
    }

    #[test]
    fn covering_pairs_touch_every_lesion() {
        let r = recs(&[1, 2, 5, 6]);
        let pairs = covering_pairs(&r, Split::Train);
        let mut seen = HashSet::new();
        for p in &pairs {
            seen.insert(p.a.clone());
            seen.insert(p.b.clone());
        }
        assert_eq!(seen.len(), r.len());
    }

    proptest::proptest! {
        #[test]
        fn pair_invariants(sizes in proptest::collection::vec(0usize..12, 1..6), cap in proptest::option::of(1usize..5), seed in 0u64..50) {
            let r = recs(&sizes);
            let cfg = DatasetConfig { pairing_cap: cap, rng_seed: seed, ..Default::default() };
            let pairs = build_pairs(&r, Split::Train, &cfg);
            let cluster: HashMap<_, _> = r.iter().map(|x| (x.lesion_id.clone(), x.cluster_id)).collect();
            let mut uses: HashMap<&str, usize> = HashMap::new();
            let set: HashSet<_> = pairs.iter().collect();
            proptest::prop_assert_eq!(set.len(), pairs.len());
            for p in &pairs {
                proptest::prop_assert!(p.a < p.b);
                proptest::prop_assert_eq!(cluster[&p.a], cluster[&p.b]);
                proptest::prop_assert_eq!(&LesionPair::new(&p.b, &p.a), p);
                *uses.entry(&p.a).or_default() += 1;
                *uses.entry(&p.b).or_default() += 1;
            }
            if let Some(cap) = cap {
                proptest::prop_assert!(uses.values().all(|&u| u <= cap));
            } else {
                let expected: usize = sizes.iter().map(|&n| n_choose_2(n)).sum();
                proptest::prop_assert_eq!(pairs.len(), expected);
            }
        }
    }
}
