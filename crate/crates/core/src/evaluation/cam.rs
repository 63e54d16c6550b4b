use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};

use crate::data_model::BscanTriplet;
use crate::error::{Error, Result};
use crate::mtl_model::MtlNetwork;

/// Rectified, upsampled and max-normalised class activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    pub map: Array2<f64>,
}

impl CamHeatmap {
    pub fn max(&self) -> f64 {
        self.map.iter().copied().fold(0.0, f64::max)
    }
}

/// Half-pixel-centre bilinear interpolation with edge clamping.
pub fn upsample_bilinear(src: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), x - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = coord(r, h, height);
        let (c0, c1, fc) = coord(c, w, width);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Weighted channel sum of `maps` (C x h x w), rectified, upsampled to
/// `height` x `width` and divided by its maximum (left at zero if all zero).
pub fn cam_from_maps(
    maps: ArrayView3<f64>,
    weights: &[f64],
    height: usize,
    width: usize,
) -> Result<CamHeatmap> {
    if maps.dim().0 != weights.len() {
        return Err(Error::Shape(format!(
            "{} feature maps but {} classifier weights",
            maps.dim().0,
            weights.len()
        )));
    }
    let mut cam = Array2::zeros((maps.dim().1, maps.dim().2));
    for (m, &w) in maps.axis_iter(Axis(0)).zip(weights) {
        cam.scaled_add(w, &m);
    }
    cam.mapv_inplace(|v: f64| v.max(0.0));
    let mut map = upsample_bilinear(cam.view(), height, width);
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.mapv_inplace(|v| v / max);
    }
    Ok(CamHeatmap { map })
}

/// Glaucoma-class activation map over the classifier's concatenated input maps.
pub fn compute_cam(net: &MtlNetwork, input: &BscanTriplet) -> Result<CamHeatmap> {
    let (_, h, w) = input.slices.dim();
    let x = input.slices.clone().insert_axis(Axis(0));
    let maps = net.feature_maps(&x)?.concatenated();
    let weights: Vec<f64> = net.classifier.fc.weight.value.row(0).to_vec();
    cam_from_maps(maps.index_axis(Axis(0), 0), &weights, h, w)
}

/// Share of the heatmap's total mass on pixels where `mask` is true
/// (0 for an all-zero map).
pub fn mass_fraction_inside(cam: &CamHeatmap, mask: &Array2<bool>) -> Result<f64> {
    if cam.map.dim() != mask.dim() {
        return Err(Error::Shape("heatmap and mask sizes differ".into()));
    }
    let total: f64 = cam.map.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = cam
        .map
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(inside / total)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, img: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(|e| Error::format(path, e.to_string()))
}

/// 8-bit grayscale rendering of the heatmap.
pub fn write_cam_png(path: &Path, cam: &CamHeatmap) -> Result<()> {
    let (h, w) = cam.map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(cam.map[[y as usize, x as usize]])])
    });
    save(path, |p| img.save(p))
}

/// The B-scan in gray with the heatmap blended in red.
pub fn write_overlay_png(path: &Path, bscan: ArrayView2<f64>, cam: &CamHeatmap) -> Result<()> {
    if bscan.dim() != cam.map.dim() {
        return Err(Error::Shape("B-scan and heatmap sizes differ".into()));
    }
    let (h, w) = bscan.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = bscan[[r, c]].clamp(0.0, 1.0);
        let a = 0.5 * cam.map[[r, c]];
        image::Rgb([
            to_u8(g * (1.0 - a) + a),
            to_u8(g * (1.0 - a)),
            to_u8(g * (1.0 - a)),
        ])
    });
    save(path, |p| img.save(p))
}
