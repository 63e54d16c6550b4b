//! Surrogate visual-field labels: each training volume without a VF
//! measurement borrows the measurement of its nearest labeled neighbour of
//! the same class in embedding space.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data_model::{ClassLabel, DatasetManifest, VfMeasurement, VfProvenance};
use crate::embedding::VolumeEmbedding;
use crate::error::{Error, Result};

/// Column header of the assignment log.
pub const ASSIGNMENT_LOG_HEADER: &str = "recipient_id,donor_id,distance";

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Training volumes split by class and VF availability.
///
/// Volumes that already carry a surrogate label belong to none of the four
/// groups; they are listed in `surrogate` so that a second labelling pass
/// neither re-labels them nor uses them as donors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupPartition {
    pub g_labeled: Vec<VolumeEmbedding>,
    pub g_unlabeled: Vec<VolumeEmbedding>,
    pub n_labeled: Vec<VolumeEmbedding>,
    pub n_unlabeled: Vec<VolumeEmbedding>,
    pub surrogate: Vec<String>,
}

impl GroupPartition {
    /// Sizes of G^l, G^u, N^l, N^u.
    pub fn counts(&self) -> [usize; 4] {
        [
            self.g_labeled.len(),
            self.g_unlabeled.len(),
            self.n_labeled.len(),
            self.n_unlabeled.len(),
        ]
    }

    pub fn labeled_total(&self) -> usize {
        self.g_labeled.len() + self.n_labeled.len()
    }
}

pub fn partition_groups(
    manifest: &DatasetManifest,
    embeddings: &[VolumeEmbedding],
) -> Result<GroupPartition> {
    let by_id: HashMap<&str, &VolumeEmbedding> =
        embeddings.iter().map(|e| (e.volume_id.as_str(), e)).collect();
    let mut part = GroupPartition::default();
    let mut dim = None;
    for r in &manifest.records {
        let emb = by_id.get(r.volume_id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("no embedding for volume '{}'", r.volume_id))
        })?;
        if *dim.get_or_insert(emb.dim()) != emb.dim() {
            return Err(Error::Shape(format!(
                "embedding of '{}' has dimension {}, expected {}",
                r.volume_id,
                emb.dim(),
                dim.unwrap_or_default()
            )));
        }
        let group = match (r.class_label, r.vf_provenance) {
            (_, VfProvenance::Surrogate) => {
                part.surrogate.push(r.volume_id.clone());
                continue;
            }
            (ClassLabel::Glaucoma, VfProvenance::Measured) => &mut part.g_labeled,
            (ClassLabel::Glaucoma, VfProvenance::Absent) => &mut part.g_unlabeled,
            (ClassLabel::Normal, VfProvenance::Measured) => &mut part.n_labeled,
            (ClassLabel::Normal, VfProvenance::Absent) => &mut part.n_unlabeled,
        };
        group.push((*emb).clone());
    }
    Ok(part)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateAssignment {
    pub recipient_id: String,
    pub donor_id: String,
    pub distance: f64,
}

/// Index and distance of the closest donor; equal distances go to the
/// lexicographically smallest donor id.
pub fn nearest_donor(query: &[f64], donors: &[VolumeEmbedding]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in donors.iter().enumerate() {
        let dist = euclidean_distance(query, &d.vector)?;
        let better = match best {
            None => true,
            Some((j, bd)) => dist < bd || (dist == bd && d.volume_id < donors[j].volume_id),
        };
        if better {
            best = Some((i, dist));
        }
    }
    Ok(best)
}

fn assign_group(
    recipients: &[VolumeEmbedding],
    donors: &[VolumeEmbedding],
    class: ClassLabel,
) -> Result<Vec<SurrogateAssignment>> {
    if recipients.is_empty() {
        return Ok(Vec::new());
    }
    if donors.is_empty() {
        return Err(Error::Precondition(format!(
            "{} {} volume(s) lack VF but no {} volume has a measured VF",
            recipients.len(),
            class.as_str(),
            class.as_str()
        )));
    }
    recipients
        .par_iter()
        .map(|r| {
            let (i, distance) = nearest_donor(&r.vector, donors)?.expect("donors non-empty");
            Ok(SurrogateAssignment {
                recipient_id: r.volume_id.clone(),
                donor_id: donors[i].volume_id.clone(),
                distance,
            })
        })
        .collect()
}

/// Assigns every unlabeled volume the VF of its nearest same-class labeled
/// donor. Returns the assignments (sorted by recipient id) and a copy of
/// `manifest` with the recipients' VF filled in and marked as surrogate.
pub fn assign_surrogates(
    manifest: &DatasetManifest,
    partition: &GroupPartition,
) -> Result<(Vec<SurrogateAssignment>, DatasetManifest)> {
    let mut assignments = assign_group(
        &partition.g_unlabeled,
        &partition.g_labeled,
        ClassLabel::Glaucoma,
    )?;
    assignments.extend(assign_group(
        &partition.n_unlabeled,
        &partition.n_labeled,
        ClassLabel::Normal,
    )?);
    assignments.sort_by(|a, b| a.recipient_id.cmp(&b.recipient_id));

    let measured: HashMap<&str, VfMeasurement> = manifest
        .records
        .iter()
        .filter(|r| r.vf_provenance == VfProvenance::Measured)
        .filter_map(|r| r.vf.map(|vf| (r.volume_id.as_str(), vf)))
        .collect();
    let donor_of: BTreeMap<&str, &str> = assignments
        .iter()
        .map(|a| (a.recipient_id.as_str(), a.donor_id.as_str()))
        .collect();

    let mut updated = manifest.clone();
    for r in &mut updated.records {
        let Some(donor) = donor_of.get(r.volume_id.as_str()) else {
            continue;
        };
        let vf = measured.get(donor).ok_or_else(|| {
            Error::Precondition(format!("donor '{donor}' is not a measured volume of the manifest"))
        })?;
        r.vf = Some(*vf);
        r.vf_provenance = VfProvenance::Surrogate;
    }
    Ok((assignments, updated))
}

/// Formats `x` with nine significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    } else {
        sci
    }
}

pub fn assignment_log_to_string(assignments: &[SurrogateAssignment]) -> String {
    let mut s = String::from(ASSIGNMENT_LOG_HEADER);
    s.push('\n');
    for a in assignments {
        let _ = writeln!(s, "{},{},{}", a.recipient_id, a.donor_id, format_sig9(a.distance));
    }
    s
}

pub fn write_assignment_log(path: &Path, assignments: &[SurrogateAssignment]) -> Result<()> {
    fs::write(path, assignment_log_to_string(assignments)).map_err(|e| Error::io(path, e))
}

pub fn read_assignment_log(path: &Path) -> Result<Vec<SurrogateAssignment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ASSIGNMENT_LOG_HEADER) {
        return Err(Error::format(path, "missing assignment log header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            match f.as_slice() {
                [r, d, dist] => Ok(SurrogateAssignment {
                    recipient_id: r.to_string(),
                    donor_id: d.to_string(),
                    distance: dist
                        .parse()
                        .map_err(|_| Error::format(path, format!("bad distance '{dist}'")))?,
                }),
                _ => Err(Error::format(path, format!("bad line '{l}'"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: &[f64]) -> VolumeEmbedding {
        VolumeEmbedding {
            volume_id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn distance_basics() {
        assert_eq!(euclidean_distance(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let donors = [emb("b", &[1.0]), emb("a", &[-1.0]), emb("c", &[1.0])];
        assert_eq!(nearest_donor(&[0.0], &donors).unwrap(), Some((1, 1.0)));
        assert_eq!(nearest_donor(&[1.0], &donors).unwrap(), Some((0, 0.0)));
    }

    #[test]
    fn empty_donor_group_is_rejected() {
        let part = GroupPartition {
            g_unlabeled: vec![emb("x", &[0.0])],
            ..Default::default()
        };
        let m = DatasetManifest::new(Vec::new(), crate::data_model::SplitTag::Train);
        assert!(matches!(assign_surrogates(&m, &part), Err(Error::Precondition(_))));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(5.0), "5.00000000");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(123.456789012), "123.456789");
        assert_eq!(format_sig9(9.9999999999), "10.0000000");
        assert_eq!(format_sig9(1.0e-7), "1.00000000e-7");
    }
}
