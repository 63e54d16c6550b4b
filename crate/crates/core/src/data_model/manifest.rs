use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result, RowError};

use super::vf::{VfAttribute, VfMeasurement};

pub const MANIFEST_COLUMNS: [&str; 11] = [
    "volume_id",
    "patient_id",
    "eye",
    "visit_id",
    "class_label",
    "vfi",
    "md",
    "psd",
    "vf_provenance",
    "bscan_count",
    "data_path",
];

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "expected one of [{}], got '{other}'",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    Left,
    Right,
}
text_enum!(Eye { Left => "left", Right => "right" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Normal,
    Glaucoma,
}
text_enum!(ClassLabel { Normal => "normal", Glaucoma => "glaucoma" });

impl ClassLabel {
    /// Glaucoma is the positive class.
    pub fn target(self) -> f64 {
        match self {
            ClassLabel::Glaucoma => 1.0,
            ClassLabel::Normal => 0.0,
        }
    }

    pub fn is_glaucoma(self) -> bool {
        self == ClassLabel::Glaucoma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VfProvenance {
    Measured,
    Surrogate,
    Absent,
}
text_enum!(VfProvenance { Measured => "measured", Surrogate => "surrogate", Absent => "absent" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}
text_enum!(SplitTag { Train => "train", Val => "val", Test => "test", Unsplit => "unsplit" });

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub patient_id: String,
    pub eye: Eye,
    pub visit_id: String,
    pub class_label: ClassLabel,
    pub vf: Option<VfMeasurement>,
    pub vf_provenance: VfProvenance,
    pub bscan_count: usize,
    pub data_path: PathBuf,
}

impl VolumeRecord {
    /// Eye-visit key used for case-level aggregation.
    pub fn case_key(&self) -> (String, Eye, String) {
        (self.patient_id.clone(), self.eye, self.visit_id.clone())
    }

    pub fn has_vf(&self) -> bool {
        self.vf.is_some()
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.volume_id.is_empty() {
            return Err(("volume_id", "empty volume_id".into()));
        }
        if self.patient_id.is_empty() {
            return Err(("patient_id", "empty patient_id".into()));
        }
        if self.bscan_count < 3 {
            return Err((
                "bscan_count",
                format!("{} slices; at least 3 are required", self.bscan_count),
            ));
        }
        if let Some(vf) = &self.vf {
            for attr in VfAttribute::ALL {
                if let Err(e) = attr.check(vf.get(attr)) {
                    let msg = match e {
                        Error::InvalidValue { message, .. } => message,
                        other => other.to_string(),
                    };
                    return Err((attr.name(), msg));
                }
            }
        }
        match (self.vf_provenance, self.vf.is_some()) {
            (VfProvenance::Absent, true) => Err((
                "vf_provenance",
                "provenance 'absent' but VF values present".into(),
            )),
            (VfProvenance::Measured | VfProvenance::Surrogate, false) => Err((
                "vf_provenance",
                format!("provenance '{}' but VF values missing", self.vf_provenance),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<VolumeRecord>,
    pub split_tag: SplitTag,
}

impl DatasetManifest {
    pub fn new(records: Vec<VolumeRecord>, split_tag: SplitTag) -> Self {
        DatasetManifest { records, split_tag }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn get(&self, volume_id: &str) -> Option<&VolumeRecord> {
        self.records.iter().find(|r| r.volume_id == volume_id)
    }

    pub fn count_class(&self, label: ClassLabel) -> usize {
        self.records.iter().filter(|r| r.class_label == label).count()
    }

    /// Checks every record invariant plus volume_id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in self.records.iter().enumerate() {
            if let Err((field, message)) = rec.check() {
                errors.push(RowError {
                    row: i + 1,
                    volume_id: rec.volume_id.clone(),
                    field: field.into(),
                    message,
                });
            } else if !seen.insert(rec.volume_id.as_str()) {
                errors.push(RowError {
                    row: i + 1,
                    volume_id: rec.volume_id.clone(),
                    field: "volume_id".into(),
                    message: "duplicate volume_id".into(),
                });
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(errors))
        }
    }
}

/// Reads and validates a manifest. Relative `data_path`s are resolved against
/// the manifest's directory and come back absolute.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let absolute = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    let base = absolute.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::format("<manifest>", e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(Error::format(
            "<manifest>",
            format!(
                "header must be exactly '{}'",
                MANIFEST_COLUMNS.join(",")
            ),
        ));
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    row: row_no,
                    volume_id: String::new(),
                    field: "<row>".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&row, base_dir) {
            Ok(rec) => {
                if let Err((field, message)) = rec.check() {
                    errors.push(RowError {
                        row: row_no,
                        volume_id: rec.volume_id.clone(),
                        field: field.into(),
                        message,
                    });
                } else if !seen.insert(rec.volume_id.clone()) {
                    errors.push(RowError {
                        row: row_no,
                        volume_id: rec.volume_id.clone(),
                        field: "volume_id".into(),
                        message: "duplicate volume_id".into(),
                    });
                } else {
                    records.push(rec);
                }
            }
            Err((field, message)) => errors.push(RowError {
                row: row_no,
                volume_id: row.get(0).unwrap_or_default().to_string(),
                field: field.into(),
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(DatasetManifest::new(records, SplitTag::Unsplit))
    } else {
        Err(Error::Manifest(errors))
    }
}

type FieldError = (&'static str, String);

fn parse_row(row: &csv::StringRecord, base_dir: &Path) -> std::result::Result<VolumeRecord, FieldError> {
    let field = |i: usize| row.get(i).unwrap_or_default().trim();
    let eye = field(2).parse::<Eye>().map_err(|e| ("eye", e))?;
    let class_label = field(4)
        .parse::<ClassLabel>()
        .map_err(|e| ("class_label", e))?;
    let vf_provenance = field(8)
        .parse::<VfProvenance>()
        .map_err(|e| ("vf_provenance", e))?;

    let mut raw = [None; 3];
    for (slot, attr) in raw.iter_mut().zip(VfAttribute::ALL) {
        let text = field(5 + attr.index());
        if !text.is_empty() {
            *slot = Some(
                text.parse::<f64>()
                    .map_err(|_| (attr.name(), format!("'{text}' is not a number")))?,
            );
        }
    }
    let vf = match raw {
        [Some(vfi), Some(md), Some(psd)] => Some(VfMeasurement { vfi, md, psd }),
        [None, None, None] => None,
        _ => {
            let missing = VfAttribute::ALL
                .iter()
                .find(|a| raw[a.index()].is_none())
                .expect("one attribute missing");
            return Err((missing.name(), "partial VF measurement".into()));
        }
    };

    let count_text = field(9);
    let bscan_count = count_text
        .parse::<usize>()
        .map_err(|_| ("bscan_count", format!("'{count_text}' is not a non-negative integer")))?;

    let path_text = field(10);
    if path_text.is_empty() {
        return Err(("data_path", "empty data_path".into()));
    }
    let data_path = {
        let p = PathBuf::from(path_text);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };

    Ok(VolumeRecord {
        volume_id: field(0).to_string(),
        patient_id: field(1).to_string(),
        eye,
        visit_id: field(3).to_string(),
        class_label,
        vf,
        vf_provenance,
        bscan_count,
        data_path,
    })
}

/// Serialises a manifest. Data paths under the manifest's directory are
/// written relative to it.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let absolute = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    let text = manifest_to_string(manifest, absolute.parent().unwrap_or(Path::new("")));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn manifest_to_string(manifest: &DatasetManifest, base_dir: &Path) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(MANIFEST_COLUMNS).expect("in-memory write");
    for r in &manifest.records {
        let vf_text = |attr: VfAttribute| {
            r.vf.map(|v| format_value(v.get(attr))).unwrap_or_default()
        };
        let path = relative_to(&r.data_path, base_dir);
        writer
            .write_record([
                r.volume_id.as_str(),
                r.patient_id.as_str(),
                r.eye.as_str(),
                r.visit_id.as_str(),
                r.class_label.as_str(),
                &vf_text(VfAttribute::Vfi),
                &vf_text(VfAttribute::Md),
                &vf_text(VfAttribute::Psd),
                r.vf_provenance.as_str(),
                &r.bscan_count.to_string(),
                &path,
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Shortest round-trip decimal form.
fn format_value(v: f64) -> String {
    format!("{v}")
}

fn relative_to(path: &Path, base: &Path) -> String {
    let rel = if base.as_os_str().is_empty() {
        path
    } else {
        path.strip_prefix(base).unwrap_or(path)
    };
    rel.to_string_lossy().replace('\\', "/")
}
