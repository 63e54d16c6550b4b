use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::manifest::{DatasetManifest, SplitTag};

/// Partitions patients (never individual volumes) into train/val/test.
///
/// Patients are shuffled with `seed`, dealt greedily to the split with the
/// largest remaining volume deficit, then single-patient moves are applied
/// while they reduce the squared deviation from the volume targets. At that
/// fixed point every split is within one patient's volume count of its target.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid("ratios", format!("{ratios:?} must all be positive")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios", format!("{ratios:?} sum to {sum}, not 1")));
    }

    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_patient.entry(r.patient_id.as_str()).or_default().push(i);
    }
    if by_patient.len() < 3 {
        return Err(Error::Precondition(format!(
            "{} patient(s) cannot fill 3 splits",
            by_patient.len()
        )));
    }

    let mut patients: Vec<(&str, Vec<usize>)> = by_patient.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = manifest.len() as f64;
    let targets = ratios.map(|r| r * total);
    let mut load = [0.0f64; 3];
    let mut members = [0usize; 3];
    let mut assign = vec![0usize; patients.len()];

    for (p, (_, vols)) in patients.iter().enumerate() {
        let split = if p < 3 {
            p
        } else {
            (0..3)
                .max_by(|&a, &b| {
                    (targets[a] - load[a])
                        .partial_cmp(&(targets[b] - load[b]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap()
        };
        assign[p] = split;
        load[split] += vols.len() as f64;
        members[split] += 1;
    }

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (p, (_, vols)) in patients.iter().enumerate() {
            let from = assign[p];
            if members[from] == 1 {
                continue;
            }
            let size = vols.len() as f64;
            for to in (0..3).filter(|&t| t != from) {
                let before = (load[from] - targets[from]).powi(2) + (load[to] - targets[to]).powi(2);
                let after = (load[from] - size - targets[from]).powi(2)
                    + (load[to] + size - targets[to]).powi(2);
                let gain = before - after;
                if gain > 1e-9 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, p, to));
                }
            }
        }
        let Some((_, p, to)) = best else { break };
        let size = patients[p].1.len() as f64;
        let from = assign[p];
        load[from] -= size;
        load[to] += size;
        members[from] -= 1;
        members[to] += 1;
        assign[p] = to;
    }

    let mut split_of = vec![0usize; manifest.len()];
    for (p, (_, vols)) in patients.iter().enumerate() {
        for &v in vols {
            split_of[v] = assign[p];
        }
    }
    let pick = |which: usize, tag: SplitTag| {
        DatasetManifest::new(
            manifest
                .records
                .iter()
                .zip(&split_of)
                .filter(|(_, &s)| s == which)
                .map(|(r, _)| r.clone())
                .collect(),
            tag,
        )
    };
    Ok((
        pick(0, SplitTag::Train),
        pick(1, SplitTag::Val),
        pick(2, SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::manifest::{ClassLabel, Eye, VfProvenance, VolumeRecord};
    use std::collections::BTreeSet;

    fn manifest(patient_sizes: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (p, &n) in patient_sizes.iter().enumerate() {
            for v in 0..n {
                records.push(VolumeRecord {
                    volume_id: format!("P{p}-{v}"),
                    patient_id: format!("P{p}"),
                    eye: Eye::Left,
                    visit_id: "V1".into(),
                    class_label: ClassLabel::Normal,
                    vf: None,
                    vf_provenance: VfProvenance::Absent,
                    bscan_count: 3,
                    data_path: "x".into(),
                });
            }
        }
        DatasetManifest::new(records, SplitTag::Unsplit)
    }

    #[test]
    fn three_patients_one_each() {
        let m = manifest(&[2, 5, 1]);
        let third = 1.0 / 3.0;
        let (a, b, c) = split_by_patient(&m, [third, third, third], 11).unwrap();
        for s in [&a, &b, &c] {
            assert_eq!(s.patients().len(), 1);
        }
    }

    #[test]
    fn too_few_patients_or_bad_ratios() {
        assert!(split_by_patient(&manifest(&[1, 1]), [0.5, 0.25, 0.25], 0).is_err());
        assert!(split_by_patient(&manifest(&[1, 1, 1]), [0.5, 0.5, 0.0], 0).is_err());
        assert!(split_by_patient(&manifest(&[1, 1, 1]), [0.5, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn deterministic_disjoint_and_balanced() {
        let sizes: Vec<usize> = (0..120).map(|i| 1 + (i * 7) % 5).collect();
        let m = manifest(&sizes);
        let r = [0.6, 0.2, 0.2];
        let first = split_by_patient(&m, r, 5).unwrap();
        let second = split_by_patient(&m, r, 5).unwrap();
        assert_eq!(first, second);
        let (a, b, c) = first;
        assert_eq!(a.split_tag, SplitTag::Train);
        assert_eq!(a.len() + b.len() + c.len(), m.len());
        let sets: Vec<BTreeSet<&str>> = vec![a.patients(), b.patients(), c.patients()];
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        let max_patient = *sizes.iter().max().unwrap() as f64;
        for (s, ratio) in [&a, &b, &c].iter().zip(r) {
            assert!((s.len() as f64 - ratio * m.len() as f64).abs() <= max_patient);
        }
    }
}
