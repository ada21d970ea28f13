use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetConfig, LesionRecord, Split};
use crate::{Error, Result};

/// Assigns train/val/test per cluster at patient granularity.
///
/// Each patient is stratified by the cluster holding most of their lesions
/// (ties to the lowest id), so a patient never straddles two splits. Within a
/// cluster, patients are shuffled with a cluster-specific stream derived from
/// `rng_seed`, then val and test are filled up to their rounded targets with
/// patients that fit; everyone else trains. Clusters with fewer than three
/// patients go entirely to train.
pub fn stratified_split(records: &mut [LesionRecord], cfg: &DatasetConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(r) = records.iter().find(|r| r.cluster_id >= cfg.num_clusters) {
        return Err(Error::Invalid(format!(
            "lesion {} has cluster_id {} >= num_clusters {}",
            r.lesion_id, r.cluster_id, cfg.num_clusters
        )));
    }

    // patient -> (cluster -> lesion count)
    let mut per_patient: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records.iter() {
        *per_patient
            .entry(r.patient_id.as_str())
            .or_default()
            .entry(r.cluster_id)
            .or_default() += 1;
    }
    // cluster -> [(patient, lesions)]
    let mut strata: BTreeMap<usize, Vec<(&str, usize)>> = BTreeMap::new();
    for (patient, clusters) in &per_patient {
        let (&home, _) = clusters
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("patient has lesions");
        let total = clusters.values().sum();
        strata.entry(home).or_default().push((patient, total));
    }

    let (_, f_val, f_test) = cfg.split_fractions;
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (cluster, mut patients) in strata {
        if patients.len() < 3 {
            log::warn!(
                "cluster {cluster} has only {} patient(s); assigning it entirely to train",
                patients.len()
            );
            for (p, _) in patients {
                assignment.insert(p.to_string(), Split::Train);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.rng_seed ^ (cluster as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        patients.shuffle(&mut rng);
        let n: usize = patients.iter().map(|p| p.1).sum();
        let val_target = (n as f64 * f_val).round() as usize;
        let test_target = (n as f64 * f_test).round() as usize;
        let (mut val, mut test) = (0, 0);
        for (p, count) in patients {
            let split = if val + count <= val_target {
                val += count;
                Split::Val
            } else if test + count <= test_target {
                test += count;
                Split::Test
            } else {
                Split::Train
            };
            assignment.insert(p.to_string(), split);
        }
    }

    for r in records.iter_mut() {
        r.split = assignment[&r.patient_id];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Point, RecistAnnotation};
    use std::collections::{HashMap, HashSet};

    fn rec(id: usize, patient: usize, cluster: usize) -> LesionRecord {
        LesionRecord {
            lesion_id: format!("L{id:05}"),
            patient_id: format!("P{patient:05}"),
            image_path: String::new(),
            recist: RecistAnnotation::new(
                [Point::new(0.0, 0.0), Point::new(2.0, 0.0)],
                [Point::new(1.0, -0.5), Point::new(1.0, 0.5)],
            ),
            cluster_id: cluster,
            split: Split::Unassigned,
        }
    }

    fn counts(records: &[LesionRecord]) -> HashMap<(usize, Split), usize> {
        let mut m = HashMap::new();
        for r in records {
            *m.entry((r.cluster_id, r.split)).or_default() += 1;
        }
        m
    }

    #[test]
    fn ten_single_lesion_patients_split_8_1_1() {
        let mut recs: Vec<_> = (0..10).map(|i| rec(i, i, 0)).collect();
        stratified_split(&mut recs, &DatasetConfig::default()).unwrap();
        let c = counts(&recs);
        assert_eq!(c[&(0, Split::Train)], 8);
        assert_eq!(c[&(0, Split::Val)], 1);
        assert_eq!(c[&(0, Split::Test)], 1);
    }

    #[test]
    fn two_hundred_clusters_of_fifty() {
        let mut recs: Vec<_> = (0..200 * 50).map(|i| rec(i, i, i / 50)).collect();
        let cfg = DatasetConfig {
            rng_seed: 11,
            ..Default::default()
        };
        stratified_split(&mut recs, &cfg).unwrap();
        let c = counts(&recs);
        for k in 0..200 {
            let train = c.get(&(k, Split::Train)).copied().unwrap_or(0);
            assert!((39..=41).contains(&train), "cluster {k}: {train}");
        }
        let again = {
            let mut r2: Vec<_> = (0..200 * 50).map(|i| rec(i, i, i / 50)).collect();
            stratified_split(&mut r2, &cfg).unwrap();
            r2
        };
        assert_eq!(recs, again);
    }

    #[test]
    fn small_cluster_goes_to_train() {
        let mut recs = vec![rec(0, 0, 0), rec(1, 1, 0), rec(2, 1, 0)];
        stratified_split(&mut recs, &DatasetConfig::default()).unwrap();
        assert!(recs.iter().all(|r| r.split == Split::Train));
    }

    #[test]
    fn out_of_range_cluster_rejected() {
        let mut recs = vec![rec(0, 0, 5)];
        let cfg = DatasetConfig {
            num_clusters: 5,
            ..Default::default()
        };
        assert!(stratified_split(&mut recs, &cfg).is_err());
    }

    proptest::proptest! {
        #[test]
        fn partition_without_patient_leakage(
            layout in proptest::collection::vec((0usize..30, 0usize..4), 1..200),
            seed in 0u64..1000,
        ) {
            let mut recs: Vec<_> = layout.iter().enumerate().map(|(i, &(p, c))| rec(i, p, c)).collect();
            let cfg = DatasetConfig { num_clusters: 4, rng_seed: seed, ..Default::default() };
            stratified_split(&mut recs, &cfg).unwrap();
            proptest::prop_assert!(recs.iter().all(|r| r.split != Split::Unassigned));
            let mut seen: HashMap<&str, Split> = HashMap::new();
            for r in &recs {
                let s = *seen.entry(r.patient_id.as_str()).or_insert(r.split);
                proptest::prop_assert_eq!(s, r.split);
            }
            let ids: HashSet<_> = recs.iter().map(|r| &r.lesion_id).collect();
            proptest::prop_assert_eq!(ids.len(), recs.len());
        }
    }
}
