//! Synthetic OCT cohort with a planted structure-function relationship.
//!
//! Every eye gets a latent structural severity `s` in `[0, 1]`. B-scans show a
//! layered retina whose nerve-fibre band thins linearly with `s`; all other
//! layers keep their depth below the inner limiting membrane, so the whole
//! class signal sits inside the retina. Visual-field indices are linear in
//! `s` (VFI and MD fall, PSD rises) plus Gaussian noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KvConfig;
use crate::error::{Error, Result};

use super::manifest::{
    write_manifest, ClassLabel, DatasetManifest, Eye, SplitTag, VfProvenance, VolumeRecord,
};
use super::vf::{VfAttribute, VfMeasurement};
use super::voxel::{write_volume, Volume};

/// Normal eyes draw severity from `[0, 0.5]`, glaucomatous eyes from
/// `[0.5 - class_overlap, 1]`.
pub const NORMAL_SEVERITY: (f64, f64) = (0.0, 0.5);

/// Retina depth (ILM to the bottom of the RPE) in units of `height / 32`.
const RETINA_DEPTH: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    /// Inclusive range of follow-up visits per patient.
    pub visits_per_patient: (usize, usize),
    /// Inclusive range of volumes acquired per eye per visit.
    pub volumes_per_visit: (usize, usize),
    pub bscans_per_volume: usize,
    pub height: usize,
    pub width: usize,
    pub glaucoma_prevalence: f64,
    pub vf_missing_rate: f64,
    /// Standard deviation of each VF index around its severity law, as a
    /// fraction of the index's clinical range.
    pub structure_function_noise: f64,
    /// Speckle/additive noise level of the rendered B-scans.
    pub image_noise: f64,
    /// Width of the severity band shared by both classes; negative values
    /// leave a gap between them.
    pub class_overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_patients: 60,
            visits_per_patient: (1, 2),
            volumes_per_visit: (1, 2),
            bscans_per_volume: 64,
            height: 32,
            width: 32,
            glaucoma_prevalence: 0.5,
            vf_missing_rate: 0.3,
            structure_function_noise: 0.05,
            image_noise: 0.1,
            class_overlap: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(name, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("n_patients", self.n_patients)?;
        for (name, (lo, hi)) in [
            ("visits_per_patient", self.visits_per_patient),
            ("volumes_per_visit", self.volumes_per_visit),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(
                    name,
                    format!("range {lo}..={hi} must be non-empty and start at 1 or more"),
                ));
            }
        }
        if self.bscans_per_volume < 3 {
            return Err(Error::invalid("bscans_per_volume", "must be at least 3"));
        }
        if self.height < 16 {
            return Err(Error::invalid("height", "must be at least 16"));
        }
        positive("width", self.width)?;
        if !(self.glaucoma_prevalence > 0.0 && self.glaucoma_prevalence < 1.0) {
            return Err(Error::invalid(
                "glaucoma_prevalence",
                format!("{} not in (0, 1)", self.glaucoma_prevalence),
            ));
        }
        if !(0.0..=1.0).contains(&self.vf_missing_rate) {
            return Err(Error::invalid(
                "vf_missing_rate",
                format!("{} not in [0, 1]", self.vf_missing_rate),
            ));
        }
        for (name, v) in [
            ("structure_function_noise", self.structure_function_noise),
            ("image_noise", self.image_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.class_overlap > -0.5 && self.class_overlap <= 0.5) {
            return Err(Error::invalid(
                "class_overlap",
                format!("{} not in (-0.5, 0.5]", self.class_overlap),
            ));
        }
        Ok(())
    }

    pub fn severity_range(&self, label: ClassLabel) -> (f64, f64) {
        match label {
            ClassLabel::Glaucoma => (NORMAL_SEVERITY.1 - self.class_overlap, 1.0),
            ClassLabel::Normal => NORMAL_SEVERITY,
        }
    }
}

fn range_from_kv(kv: &KvConfig, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
    match kv.parsed_list(key, vec![default.0, default.1])?.as_slice() {
        [n] => Ok((*n, *n)),
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(Error::invalid(key, "expected 'n' or 'min,max'")),
    }
}

impl SyntheticSpec {
    /// Reads overrides of the defaults; ranges are written `min,max`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n_patients: kv.parsed("n_patients", d.n_patients)?,
            visits_per_patient: range_from_kv(kv, "visits_per_patient", d.visits_per_patient)?,
            volumes_per_visit: range_from_kv(kv, "volumes_per_visit", d.volumes_per_visit)?,
            bscans_per_volume: kv.parsed("bscans_per_volume", d.bscans_per_volume)?,
            height: kv.parsed("height", d.height)?,
            width: kv.parsed("width", d.width)?,
            glaucoma_prevalence: kv.parsed("glaucoma_prevalence", d.glaucoma_prevalence)?,
            vf_missing_rate: kv.parsed("vf_missing_rate", d.vf_missing_rate)?,
            structure_function_noise: kv
                .parsed("structure_function_noise", d.structure_function_noise)?,
            image_noise: kv.parsed("image_noise", d.image_noise)?,
            class_overlap: kv.parsed("class_overlap", d.class_overlap)?,
            seed: kv.parsed("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_patients", self.n_patients);
        let (a, b) = self.visits_per_patient;
        kv.set("visits_per_patient", format!("{a},{b}"));
        let (a, b) = self.volumes_per_visit;
        kv.set("volumes_per_visit", format!("{a},{b}"));
        kv.set("bscans_per_volume", self.bscans_per_volume);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("glaucoma_prevalence", self.glaucoma_prevalence);
        kv.set("vf_missing_rate", self.vf_missing_rate);
        kv.set("structure_function_noise", self.structure_function_noise);
        kv.set("image_noise", self.image_noise);
        kv.set("class_overlap", self.class_overlap);
        kv.set("seed", self.seed);
        kv
    }
}

/// Noise-free VF indices for a severity.
pub fn vf_law(severity: f64) -> VfMeasurement {
    VfMeasurement {
        vfi: 99.0 - 75.0 * severity,
        md: -0.5 - 24.0 * severity,
        psd: 1.5 + 13.0 * severity,
    }
}

/// Ground truth for one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeTruth {
    pub patient_id: String,
    pub eye: Eye,
    pub class_label: ClassLabel,
    pub severity: f64,
    /// Anatomy shared by every scan of the eye.
    pub ilm_base: f64,
    pub cup_depth: f64,
    pub texture_phase: f64,
}

/// Deterministic geometry of one rendered volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub severity: f64,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    ilm_base: f64,
    tilt: f64,
    cup_depth: f64,
    gain: f64,
    texture_phase: f64,
}

impl PhantomGeometry {
    fn unit(&self) -> f64 {
        self.height as f64 / 32.0
    }

    fn disc_weight(&self, z: usize, x: f64, spread: f64) -> f64 {
        let dx = (x - self.width as f64 / 2.0) / (spread * self.width as f64);
        let dz = (z as f64 + 0.5 - self.n_slices as f64 / 2.0) / (spread * self.n_slices as f64);
        (-(dx * dx + dz * dz) / 2.0).exp()
    }

    /// Row of the inner limiting membrane at column centre `x`.
    pub fn ilm_row(&self, z: usize, x: f64) -> f64 {
        self.ilm_base
            + self.tilt * (x - self.width as f64 / 2.0)
            + self.cup_depth * self.disc_weight(z, x, 0.12)
    }

    /// Nerve-fibre layer thickness in rows; linear and decreasing in severity.
    pub fn rnfl_thickness(&self, z: usize, x: f64) -> f64 {
        self.unit() * 6.5 * (1.0 - 0.7 * self.severity) * (0.75 + 0.5 * self.disc_weight(z, x, 0.3))
    }

    /// Retina (ILM through RPE) membership of each pixel centre.
    pub fn retina_mask(&self, z: usize) -> Array2<bool> {
        let depth = RETINA_DEPTH * self.unit();
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            let top = self.ilm_row(z, c as f64 + 0.5);
            let y = r as f64 + 0.5;
            y >= top && y < top + depth
        })
    }

    /// Noise-free slice.
    pub fn render_clean(&self, z: usize) -> Array2<f64> {
        let u = self.unit();
        let mut img = Array2::zeros((self.height, self.width));
        for c in 0..self.width {
            let x = c as f64 + 0.5;
            let ilm = self.ilm_row(z, x);
            let t = self.rnfl_thickness(z, x);
            let choroid = 0.32 + 0.08 * (0.9 * x + 0.5 * z as f64 + self.texture_phase).sin();
            // (upper boundary, intensity) of each layer from the vitreous down
            let layers = [
                (f64::NEG_INFINITY, 0.04),
                (ilm, 0.85),
                (ilm + t, 0.45),
                (ilm + 9.0 * u, 0.22),
                (ilm + 10.5 * u, 0.55),
                (ilm + 11.5 * u, 0.18),
                (ilm + 13.5 * u, 0.95),
                (ilm + RETINA_DEPTH * u, choroid),
            ];
            for r in 0..self.height {
                let (top, bottom) = (r as f64, r as f64 + 1.0);
                let mut v = 0.0;
                for (k, &(start, intensity)) in layers.iter().enumerate() {
                    let end = layers.get(k + 1).map_or(f64::INFINITY, |l| l.0);
                    let overlap = (end.min(bottom) - start.max(top)).max(0.0);
                    v += overlap * intensity;
                }
                img[[r, c]] = v * self.gain;
            }
        }
        img
    }

    fn render<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> Volume {
        let mut vox = Array3::<f32>::zeros((self.n_slices, self.height, self.width));
        for z in 0..self.n_slices {
            let clean = self.render_clean(z);
            for ((r, c), &v) in clean.indexed_iter() {
                let speckle: f64 = StandardNormal.sample(rng);
                let additive: f64 = StandardNormal.sample(rng);
                let noisy = v * (1.0 + noise * speckle) + 0.5 * noise * additive;
                vox[[z, r, c]] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
        Volume::new(vox)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.records`.
    pub volumes: Vec<Volume>,
    /// Parallel to `manifest.records`.
    pub geometry: Vec<PhantomGeometry>,
    pub eyes: Vec<EyeTruth>,
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut volumes = Vec::new();
    let mut geometry = Vec::new();
    let mut eyes = Vec::new();
    let u = spec.height as f64 / 32.0;

    for p in 0..spec.n_patients {
        let patient_id = format!("P{:04}", p + 1);
        let eye_set: Vec<Eye> = if rng.random_bool(0.5) {
            vec![Eye::Left, Eye::Right]
        } else if rng.random_bool(0.5) {
            vec![Eye::Left]
        } else {
            vec![Eye::Right]
        };
        let patient_eyes: Vec<EyeTruth> = eye_set
            .into_iter()
            .map(|eye| {
                let class_label = if rng.random_bool(spec.glaucoma_prevalence) {
                    ClassLabel::Glaucoma
                } else {
                    ClassLabel::Normal
                };
                let (lo, hi) = spec.severity_range(class_label);
                EyeTruth {
                    patient_id: patient_id.clone(),
                    eye,
                    class_label,
                    severity: rng.random_range(lo..=hi),
                    ilm_base: 0.25 * spec.height as f64 + rng.random_range(-1.5..=1.5) * u,
                    cup_depth: rng.random_range(0.5..=1.5) * u,
                    texture_phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();

        let visits = rng.random_range(spec.visits_per_patient.0..=spec.visits_per_patient.1);
        for visit in 1..=visits {
            let visit_id = format!("V{visit}");
            for truth in &patient_eyes {
                let vf = noisy_vf(truth.severity, spec.structure_function_noise, &mut rng);
                let n_vol = rng.random_range(spec.volumes_per_visit.0..=spec.volumes_per_visit.1);
                for k in 1..=n_vol {
                    let side = match truth.eye {
                        Eye::Left => "L",
                        Eye::Right => "R",
                    };
                    let volume_id = format!("{patient_id}-{side}-{visit_id}-{k}");
                    let geo = PhantomGeometry {
                        severity: truth.severity,
                        n_slices: spec.bscans_per_volume,
                        height: spec.height,
                        width: spec.width,
                        // acquisition varies from scan to scan
                        ilm_base: truth.ilm_base + rng.random_range(-0.5..=0.5) * u,
                        tilt: rng.random_range(-0.05..=0.05),
                        cup_depth: truth.cup_depth,
                        gain: rng.random_range(0.9..=1.05),
                        texture_phase: truth.texture_phase,
                    };
                    let volume = geo.render(spec.image_noise, &mut rng);
                    let missing = rng.random_bool(spec.vf_missing_rate);
                    records.push(VolumeRecord {
                        data_path: PathBuf::from(format!("volumes/{volume_id}.vol")),
                        volume_id,
                        patient_id: patient_id.clone(),
                        eye: truth.eye,
                        visit_id: visit_id.clone(),
                        class_label: truth.class_label,
                        vf: (!missing).then_some(vf),
                        vf_provenance: if missing {
                            VfProvenance::Absent
                        } else {
                            VfProvenance::Measured
                        },
                        bscan_count: spec.bscans_per_volume,
                    });
                    volumes.push(volume);
                    geometry.push(geo);
                }
            }
        }
        eyes.extend(patient_eyes);
    }

    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(records, SplitTag::Unsplit),
        volumes,
        geometry,
        eyes,
    })
}

fn noisy_vf<R: Rng + ?Sized>(severity: f64, noise: f64, rng: &mut R) -> VfMeasurement {
    let base = vf_law(severity);
    let mut out = [0.0; 3];
    for attr in VfAttribute::ALL {
        let (lo, hi) = attr.range();
        let z: f64 = StandardNormal.sample(rng);
        out[attr.index()] = (base.get(attr) + noise * (hi - lo) * z).clamp(lo, hi);
    }
    VfMeasurement {
        vfi: out[0],
        md: out[1],
        psd: out[2],
    }
}

/// Writes `manifest.csv` and `volumes/<id>.vol` under `dir`; returns the
/// manifest path.
pub fn write_synthetic_dataset(dir: &Path, dataset: &SyntheticDataset) -> Result<PathBuf> {
    for (rec, vol) in dataset.manifest.records.iter().zip(&dataset.volumes) {
        write_volume(&dir.join(&rec.data_path), vol)?;
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &dataset.manifest)?;
    Ok(path)
}

/// Head-counts of a cohort; used to build voxel-free manifests with a
/// prescribed patient / eye-visit / volume structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortCensus {
    pub patients: usize,
    pub glaucoma_cases: usize,
    pub normal_cases: usize,
    pub glaucoma_volumes: usize,
    pub normal_volumes: usize,
}

impl CohortCensus {
    /// 930 subjects, 3182 eye visits (1901 glaucoma), 4877 volumes (2926 glaucoma).
    pub const CLINICAL_REFERENCE: CohortCensus = CohortCensus {
        patients: 930,
        glaucoma_cases: 1901,
        normal_cases: 1281,
        glaucoma_volumes: 2926,
        normal_volumes: 1951,
    };

    /// Cases are dealt round-robin to patients (alternating eyes, then new
    /// visits); each case holds one volume plus a round-robin share of the
    /// class's remaining volumes. No VF values are attached.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let cases = self.glaucoma_cases + self.normal_cases;
        if self.patients == 0 || cases < self.patients {
            return Err(Error::invalid("patients", "every patient needs at least one case"));
        }
        if self.glaucoma_volumes < self.glaucoma_cases || self.normal_volumes < self.normal_cases {
            return Err(Error::invalid("volumes", "every case needs at least one volume"));
        }
        let mut per_patient = vec![0usize; self.patients];
        let mut records = Vec::new();
        let mut case_index = 0usize;
        for (label, n_cases, n_volumes) in [
            (ClassLabel::Glaucoma, self.glaucoma_cases, self.glaucoma_volumes),
            (ClassLabel::Normal, self.normal_cases, self.normal_volumes),
        ] {
            let extra = n_volumes - n_cases;
            for c in 0..n_cases {
                let p = case_index % self.patients;
                case_index += 1;
                let j = per_patient[p];
                per_patient[p] += 1;
                let eye = if j % 2 == 0 { Eye::Left } else { Eye::Right };
                let visit_id = format!("V{}", j / 2 + 1);
                let n_vol = 1 + extra / n_cases + usize::from(c < extra % n_cases);
                for k in 1..=n_vol {
                    let volume_id = format!("P{:04}-{}-{}-{k}", p + 1, eye, visit_id);
                    records.push(VolumeRecord {
                        data_path: PathBuf::from(format!("volumes/{volume_id}.vol")),
                        volume_id,
                        patient_id: format!("P{:04}", p + 1),
                        eye,
                        visit_id: visit_id.clone(),
                        class_label: label,
                        vf: None,
                        vf_provenance: VfProvenance::Absent,
                        bscan_count: 64,
                    });
                }
            }
        }
        Ok(DatasetManifest::new(records, SplitTag::Unsplit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_patients: 12,
            bscans_per_volume: 5,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic_dataset(&small(4)).unwrap();
        let b = generate_synthetic_dataset(&small(4)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.volumes, b.volumes);
        let c = generate_synthetic_dataset(&small(5)).unwrap();
        assert_ne!(a.volumes, c.volumes);
    }

    #[test]
    fn records_are_valid_and_in_range() {
        let ds = generate_synthetic_dataset(&small(1)).unwrap();
        ds.manifest.validate().unwrap();
        for (rec, vol) in ds.manifest.records.iter().zip(&ds.volumes) {
            assert_eq!(vol.n_slices(), rec.bscan_count);
            assert!(vol.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn missing_rate_endpoints() {
        let spec = SyntheticSpec {
            vf_missing_rate: 0.0,
            ..small(2)
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert!(ds
            .manifest
            .records
            .iter()
            .all(|r| r.vf_provenance == VfProvenance::Measured));
        let spec = SyntheticSpec {
            vf_missing_rate: 1.0,
            ..small(2)
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert!(ds.manifest.records.iter().all(|r| r.vf.is_none()));
    }

    #[test]
    fn noiseless_vf_is_monotone_in_severity() {
        let spec = SyntheticSpec {
            structure_function_noise: 0.0,
            vf_missing_rate: 0.0,
            n_patients: 40,
            ..small(3)
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let mut pairs: Vec<(f64, VfMeasurement)> = ds
            .manifest
            .records
            .iter()
            .zip(&ds.geometry)
            .map(|(r, g)| (g.severity, r.vf.unwrap()))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 {
                assert!(w[1].1.vfi < w[0].1.vfi);
                assert!(w[1].1.md < w[0].1.md);
                assert!(w[1].1.psd > w[0].1.psd);
            }
        }
        // Pearson correlation of |MD| with severity
        let n = pairs.len() as f64;
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1.md.abs()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        assert!((cov / (vx * vy).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nerve_fibre_band_thins_with_severity() {
        let mut geo = generate_synthetic_dataset(&small(0)).unwrap().geometry[0].clone();
        geo.severity = 0.1;
        let healthy = geo.rnfl_thickness(2, 16.0);
        let bright_healthy = geo.render_clean(2).iter().filter(|&&v| v > 0.7).count();
        geo.severity = 0.9;
        assert!(geo.rnfl_thickness(2, 16.0) < healthy);
        let bright_sick = geo.render_clean(2).iter().filter(|&&v| v > 0.7).count();
        assert!(bright_sick < bright_healthy);
        // the retina mask does not move with severity
        let mask = geo.retina_mask(2);
        geo.severity = 0.1;
        assert_eq!(mask, geo.retina_mask(2));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = SyntheticSpec {
            vf_missing_rate: 1.5,
            ..SyntheticSpec::default()
        };
        match bad.validate() {
            Err(Error::InvalidValue { field, .. }) => assert_eq!(field, "vf_missing_rate"),
            other => panic!("{other:?}"),
        }
        let bad = SyntheticSpec {
            bscans_per_volume: 2,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn census_manifest_has_requested_counts() {
        let m = CohortCensus::CLINICAL_REFERENCE.manifest().unwrap();
        m.validate().unwrap();
        assert_eq!(m.len(), 4877);
        assert_eq!(m.count_class(ClassLabel::Glaucoma), 2926);
        assert_eq!(m.patients().len(), 930);
        let cases: std::collections::HashSet<_> = m.records.iter().map(|r| r.case_key()).collect();
        assert_eq!(cases.len(), 3182);
    }
}
