use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three global visual-field indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VfAttribute {
    Vfi,
    Md,
    Psd,
}

impl VfAttribute {
    pub const ALL: [VfAttribute; 3] = [VfAttribute::Vfi, VfAttribute::Md, VfAttribute::Psd];

    pub fn name(self) -> &'static str {
        match self {
            VfAttribute::Vfi => "vfi",
            VfAttribute::Md => "md",
            VfAttribute::Psd => "psd",
        }
    }

    /// Clinical bounds used both for validation and for the unit-range map.
    pub fn range(self) -> (f64, f64) {
        match self {
            VfAttribute::Vfi => (0.0, 100.0),
            VfAttribute::Md => (-35.0, 5.0),
            VfAttribute::Psd => (0.0, 20.0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn check(self, value: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if value.is_finite() && (lo..=hi).contains(&value) {
            Ok(value)
        } else {
            Err(Error::invalid(
                self.name(),
                format!("value {value} outside [{lo}, {hi}]"),
            ))
        }
    }
}

/// A visual-field test result: VFI in percent, MD and PSD in decibels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfMeasurement {
    pub vfi: f64,
    pub md: f64,
    pub psd: f64,
}

impl VfMeasurement {
    pub fn new(vfi: f64, md: f64, psd: f64) -> Result<Self> {
        Ok(VfMeasurement {
            vfi: VfAttribute::Vfi.check(vfi)?,
            md: VfAttribute::Md.check(md)?,
            psd: VfAttribute::Psd.check(psd)?,
        })
    }

    pub fn get(&self, attr: VfAttribute) -> f64 {
        match attr {
            VfAttribute::Vfi => self.vfi,
            VfAttribute::Md => self.md,
            VfAttribute::Psd => self.psd,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.vfi, self.md, self.psd]
    }

    pub fn validate(&self) -> Result<()> {
        for attr in VfAttribute::ALL {
            attr.check(self.get(attr))?;
        }
        Ok(())
    }

    /// Affine map of each attribute onto `[0, 1]` over its clinical range.
    pub fn normalize(&self) -> Result<[f64; 3]> {
        self.validate()?;
        Ok(VfAttribute::ALL.map(|a| {
            let (lo, hi) = a.range();
            (self.get(a) - lo) / (hi - lo)
        }))
    }

    pub fn denormalize(unit: [f64; 3]) -> Result<Self> {
        let mut out = [0.0; 3];
        for attr in VfAttribute::ALL {
            let u = unit[attr.index()];
            if !(u.is_finite() && (0.0..=1.0).contains(&u)) {
                return Err(Error::invalid(
                    attr.name(),
                    format!("normalized value {u} outside [0, 1]"),
                ));
            }
            let (lo, hi) = attr.range();
            out[attr.index()] = lo + u * (hi - lo);
        }
        Ok(VfMeasurement {
            vfi: out[0],
            md: out[1],
            psd: out[2],
        })
    }
}
