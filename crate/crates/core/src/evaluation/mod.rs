//! Classification metrics at volume ("image") and case level, VF regression
//! errors, and class activation maps.

mod cam;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cam::{
    cam_from_maps, compute_cam, mass_fraction_inside, upsample_bilinear, write_cam_png,
    write_overlay_png, CamHeatmap,
};

use crate::data_model::{ClassLabel, DatasetManifest, Eye, VfAttribute, VfProvenance};
use crate::error::{Error, Result};
use crate::mtl_model::MtlNetwork;
use crate::training::{predict_all, LabeledVolumes, VolumePrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Glaucoma is the positive class; 0 when there are neither true nor
    /// predicted positives.
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub n: usize,
}

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::invalid("label", format!("{y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic with ties counted
/// half. `None` when either class is missing.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("score", "NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    // twice the count of (positive, negative) pairs ordered correctly, ties once
    let (mut u2, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count() as u64;
        let neg = (j - i) as u64 - pos;
        u2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(Some(u2 as f64 / (2 * n_pos * n_neg) as f64))
}

/// Accuracy and F1 at `threshold` (score >= threshold is glaucoma) plus AUC.
pub fn compute_metrics(probabilities: &[f64], labels: &[f64], threshold: f64) -> Result<Metrics> {
    if probabilities.is_empty() {
        return Err(Error::Precondition("no predictions to score".into()));
    }
    let auc = auc(probabilities, labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        f1: if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        },
        auc,
        n: labels.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasePrediction {
    pub patient_id: String,
    pub eye: Eye,
    pub visit_id: String,
    pub probability: f64,
    pub label: ClassLabel,
    pub n_volumes: usize,
}

/// Averages volume probabilities within each (patient, eye, visit) case.
/// Cases are returned in key order; the mean is taken over sorted values so
/// the result does not depend on volume order.
pub fn aggregate_case_level(
    manifest: &DatasetManifest,
    volume_probs: &BTreeMap<String, f64>,
) -> Result<Vec<CasePrediction>> {
    let mut cases: BTreeMap<(String, Eye, String), (ClassLabel, Vec<f64>)> = BTreeMap::new();
    for r in &manifest.records {
        let p = *volume_probs.get(&r.volume_id).ok_or_else(|| {
            Error::Precondition(format!("no prediction for volume '{}'", r.volume_id))
        })?;
        let entry = cases
            .entry(r.case_key())
            .or_insert_with(|| (r.class_label, Vec::new()));
        if entry.0 != r.class_label {
            return Err(Error::Precondition(format!(
                "conflicting class labels within case {}/{}/{}",
                r.patient_id,
                r.eye.as_str(),
                r.visit_id
            )));
        }
        entry.1.push(p);
    }
    Ok(cases
        .into_iter()
        .map(|((patient_id, eye, visit_id), (label, mut probs))| {
            probs.sort_by(f64::total_cmp);
            CasePrediction {
                patient_id,
                eye,
                visit_id,
                probability: probs.iter().sum::<f64>() / probs.len() as f64,
                label,
                n_volumes: probs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfErrors {
    pub vfi: f64,
    pub md: f64,
    pub psd: f64,
    /// Number of VF-measured volumes scored.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub glaucoma_volumes: usize,
    pub normal_volumes: usize,
    pub glaucoma_cases: usize,
    pub normal_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_level: Metrics,
    pub case_level: Metrics,
    /// Mean absolute error in clinical units; absent without measured VF.
    pub vf_mae: Option<VfErrors>,
    pub counts: ClassCounts,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report serialises") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Builds the report from precomputed volume predictions.
pub fn report_from_predictions(
    manifest: &DatasetManifest,
    predictions: &BTreeMap<String, VolumePrediction>,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::Precondition("test split is empty".into()));
    }
    let probs: BTreeMap<String, f64> = predictions
        .iter()
        .map(|(k, v)| (k.clone(), v.probability))
        .collect();
    let labels: Vec<f64> = manifest.records.iter().map(|r| r.class_label.target()).collect();
    let image_probs = manifest
        .records
        .iter()
        .map(|r| {
            probs.get(&r.volume_id).copied().ok_or_else(|| {
                Error::Precondition(format!("no prediction for volume '{}'", r.volume_id))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let cases = aggregate_case_level(manifest, &probs)?;
    let case_probs: Vec<f64> = cases.iter().map(|c| c.probability).collect();
    let case_labels: Vec<f64> = cases.iter().map(|c| c.label.target()).collect();

    let mut abs = [0.0f64; 3];
    let mut n_vf = 0usize;
    for r in &manifest.records {
        if let (VfProvenance::Measured, Some(vf)) = (r.vf_provenance, &r.vf) {
            let pred = &predictions[&r.volume_id].vf;
            for a in VfAttribute::ALL {
                abs[a.index()] += (pred.get(a) - vf.get(a)).abs();
            }
            n_vf += 1;
        }
    }
    let vf_mae = (n_vf > 0).then(|| VfErrors {
        vfi: abs[0] / n_vf as f64,
        md: abs[1] / n_vf as f64,
        psd: abs[2] / n_vf as f64,
        n: n_vf,
    });

    Ok(MetricsReport {
        image_level: compute_metrics(&image_probs, &labels, 0.5)?,
        case_level: compute_metrics(&case_probs, &case_labels, 0.5)?,
        vf_mae,
        counts: ClassCounts {
            glaucoma_volumes: manifest.count_class(ClassLabel::Glaucoma),
            normal_volumes: manifest.count_class(ClassLabel::Normal),
            glaucoma_cases: cases.iter().filter(|c| c.label.is_glaucoma()).count(),
            normal_cases: cases.iter().filter(|c| !c.label.is_glaucoma()).count(),
        },
    })
}

/// Predicts every test volume and scores both levels.
pub fn evaluate(test: LabeledVolumes<'_>, net: &MtlNetwork) -> Result<MetricsReport> {
    if test.manifest.is_empty() {
        return Err(Error::Precondition("test split is empty".into()));
    }
    report_from_predictions(test.manifest, &predict_all(net, test)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_small_cases() {
        assert_eq!(auc(&[0.9, 0.6, 0.4], &[1.0, 0.0, 1.0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[1.0, 1.0]).unwrap(), None);
        assert!(auc(&[0.3], &[2.0]).is_err());
    }

    #[test]
    fn perfect_classifier() {
        let m = compute_metrics(&[0.1, 0.3, 0.7, 0.8], &[0.0, 0.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.f1, m.auc), (1.0, 1.0, Some(1.0)));
    }

    #[test]
    fn f1_without_positives_is_zero() {
        let m = compute_metrics(&[0.1, 0.2], &[0.0, 0.0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.f1, m.auc), (1.0, 0.0, None));
    }
}
