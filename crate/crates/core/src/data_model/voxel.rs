//! Voxel files: three little-endian `u32` (n_slices, height, width) followed
//! by `f32` intensities in slice, row, column order.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// An OCT volume as an ordered stack of B-scans, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[slice, row, column]`
    pub voxels: Array3<f32>,
}

impl Volume {
    pub fn new(voxels: Array3<f32>) -> Self {
        Volume { voxels }
    }

    pub fn from_slices(slices: &[Array2<f32>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("volume needs at least one slice".into()))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::zeros((slices.len(), h, w));
        for (i, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "slice {i} is {:?}, expected {:?}",
                    s.dim(),
                    (h, w)
                )));
            }
            voxels.index_axis_mut(ndarray::Axis(0), i).assign(s);
        }
        Ok(Volume { voxels })
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(ndarray::Axis(0), index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, h, w) = self.voxels.dim();
        let mut out = Vec::with_capacity(12 + 4 * n * h * w);
        for d in [n, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.voxels.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 {
            return Err("header truncated".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (n, h, w) = (dim(0), dim(1), dim(2));
        let expected = 12 + 4 * n * h * w;
        if bytes.len() != expected {
            return Err(format!(
                "header says {n}x{h}x{w} ({expected} bytes), file has {}",
                bytes.len()
            ));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Volume {
            voxels: Array3::from_shape_vec((n, h, w), data).expect("sized"),
        })
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}
