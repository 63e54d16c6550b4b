//! Stage-1 representation: a B-scan classifier whose global-average-pooled
//! features are aggregated into one vector per volume by norm-3 pooling.

mod backbone;
mod cache;

pub use backbone::{
    extract_bscan_features, load_backbone, save_backbone, train_backbone, Backbone,
    BackboneConfig, BackboneEpoch, BackboneRun,
};
pub use cache::{read_feature_cache, write_feature_cache};

use crate::data_model::Volume;
use crate::error::{Error, Result};

/// Aggregated feature vector of one OCT volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEmbedding {
    pub volume_id: String,
    pub vector: Vec<f64>,
}

impl VolumeEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Elementwise `(sum_i f_i^3)^(1/3)` with a sign-preserving cube root.
pub fn pool_norm3(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Precondition("cannot pool an empty feature list".into()))?;
    let d = first.len();
    if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.len() != d) {
        return Err(Error::Shape(format!(
            "feature {i} has dimension {}, expected {d}",
            f.len()
        )));
    }
    // cubes are summed in sorted order so the result does not depend on slice order
    let mut column = vec![0.0; features.len()];
    Ok((0..d)
        .map(|k| {
            for (c, f) in column.iter_mut().zip(features) {
                *c = f[k] * f[k] * f[k];
            }
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum::<f64>().cbrt()
        })
        .collect())
}

/// Features of every B-scan of `volume`, pooled into one embedding.
pub fn embed_volume(backbone: &Backbone, volume_id: &str, volume: &Volume) -> Result<VolumeEmbedding> {
    let features = extract_bscan_features(backbone, volume)?;
    Ok(VolumeEmbedding {
        volume_id: volume_id.to_string(),
        vector: pool_norm3(&features)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_vector_is_identity() {
        let f = vec![0.3, 2.0, 0.0, 7.5];
        assert_eq!(pool_norm3(std::slice::from_ref(&f)).unwrap(), f);
    }

    #[test]
    fn two_copies() {
        let p = pool_norm3(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let c = 2f64.powf(1.0 / 3.0);
        assert!((p[0] - c).abs() < 1e-12 && (p[1] - 2.0 * c).abs() < 1e-12);
        assert!((p[0] - 1.2599).abs() < 1e-4 && (p[1] - 2.5198).abs() < 1e-4);
    }

    #[test]
    fn negative_sums_use_signed_root() {
        let p = pool_norm3(&[vec![-2.0], vec![1.0]]).unwrap();
        assert!((p[0] + 7f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(pool_norm3(&[]).is_err());
        assert!(matches!(
            pool_norm3(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn monotone_in_each_coordinate(
            feats in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 4), 1..6),
            which in 0usize..6, coord in 0usize..4, bump in 0.0..3.0f64,
        ) {
            let base = pool_norm3(&feats).unwrap();
            let mut raised = feats.clone();
            let i = which % raised.len();
            raised[i][coord] += bump;
            let after = pool_norm3(&raised).unwrap();
            prop_assert!(after[coord] >= base[coord]);
        }
    }
}
