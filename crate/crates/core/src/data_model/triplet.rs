use ndarray::{s, Array3};

use crate::error::{Error, Result};

use super::voxel::Volume;

/// Three adjacent B-scans stacked as channels, centred on `center_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct BscanTriplet {
    /// `[3, height, width]`, slices `center-1, center, center+1`.
    pub slices: Array3<f64>,
    pub center_index: usize,
    pub volume_id: String,
}

/// Valid triplet centres for a volume of `n` slices: `1..=n-2`.
pub fn triplet_centers(n_slices: usize) -> Result<std::ops::Range<usize>> {
    if n_slices < 3 {
        return Err(Error::Precondition(format!(
            "volume has {n_slices} slice(s); triplets need at least 3"
        )));
    }
    Ok(1..n_slices - 1)
}

pub fn triplet_at(volume: &Volume, center: usize) -> Array3<f64> {
    volume
        .voxels
        .slice(s![center - 1..center + 2, .., ..])
        .mapv(f64::from)
}

/// One triplet per interior slice, stride 1, no wraparound.
pub fn make_bscan_triplets(volume_id: &str, volume: &Volume) -> Result<Vec<BscanTriplet>> {
    Ok(triplet_centers(volume.n_slices())?
        .map(|c| BscanTriplet {
            slices: triplet_at(volume, c),
            center_index: c,
            volume_id: volume_id.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume {
        Volume::new(Array3::from_shape_fn((n, 4, 5), |(z, _, _)| z as f32 / n as f32))
    }

    #[test]
    fn counts_and_centres() {
        let t = make_bscan_triplets("v", &ramp(3)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].center_index, 1);

        // enumerate all windows of 3 consecutive indices in 0..128
        let n = 128;
        let windows = (0..n).filter(|&i| i + 2 < n).count();
        let t = make_bscan_triplets("v", &ramp(n)).unwrap();
        assert_eq!(t.len(), windows);
        assert_eq!(windows, 126);
        for (k, trip) in t.iter().enumerate() {
            assert_eq!(trip.center_index, k + 1);
            for ch in 0..3 {
                let expected = (k + ch) as f64 / n as f64;
                assert!((trip.slices[[ch, 2, 3]] - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn too_few_slices() {
        assert!(make_bscan_triplets("v", &ramp(2)).is_err());
    }
}
