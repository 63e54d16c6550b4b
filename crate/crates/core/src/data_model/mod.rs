//! Dataset schema, manifests, patient-level splitting, VF normalisation,
//! B-scan triplets and the synthetic cohort generator.

mod manifest;
mod split;
pub mod synthetic;
mod triplet;
mod vf;
mod voxel;

pub use manifest::{
    load_manifest, manifest_to_string, parse_manifest, write_manifest, ClassLabel,
    DatasetManifest, Eye, SplitTag, VfProvenance, VolumeRecord, MANIFEST_COLUMNS,
};
pub use split::split_by_patient;
pub use synthetic::{generate_synthetic_dataset, write_synthetic_dataset, SyntheticSpec};
pub use triplet::{make_bscan_triplets, triplet_at, triplet_centers, BscanTriplet};
pub use vf::{VfAttribute, VfMeasurement};
pub use voxel::{read_volume, write_volume, Volume};

use crate::error::{Error, Result};

/// Reads every volume of a manifest, checking slice counts against the records.
pub fn load_volumes(manifest: &DatasetManifest) -> Result<Vec<Volume>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let vol = read_volume(&r.data_path)?;
            if vol.n_slices() != r.bscan_count {
                return Err(Error::Shape(format!(
                    "volume '{}' has {} slices, manifest says {}",
                    r.volume_id,
                    vol.n_slices(),
                    r.bscan_count
                )));
            }
            Ok(vol)
        })
        .collect()
}
