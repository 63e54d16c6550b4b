//! The pipeline stages as library functions. Each writes its artifacts and a
//! `run_record.json` into its output directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use octscreen::config::KvConfig;
use octscreen::data_model::{
    generate_synthetic_dataset, load_manifest, load_volumes, make_bscan_triplets,
    split_by_patient, write_manifest, write_synthetic_dataset, DatasetManifest, SyntheticSpec,
};
use octscreen::embedding::{
    embed_volume, load_backbone, read_feature_cache, save_backbone, train_backbone,
    write_feature_cache, BackboneConfig,
};
use octscreen::evaluation::{
    compute_cam, report_from_predictions, write_cam_png, write_overlay_png, CamHeatmap,
    MetricsReport,
};
use octscreen::mtl_model::MtlNetwork;
use octscreen::surrogate::{
    assign_surrogates, partition_groups, write_assignment_log, SurrogateAssignment,
};
use octscreen::training::{
    continue_training, predict_all, LabeledVolumes, TrainConfig, TrainState,
};
use octscreen::{Error, Result};

use crate::run_record::RunRecord;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const TEST_FILE: &str = "test.csv";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELED_FILE: &str = "train_labeled.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn split_ratios(kv: &KvConfig) -> Result<[f64; 3]> {
    match kv.parsed_list("split_ratios", vec![0.6, 0.2, 0.2])?.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::invalid("split_ratios", "expected three fractions")),
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Generates a synthetic cohort and its patient-level train/val/test split.
pub fn synth(out: &Path, kv: &KvConfig) -> Result<SynthOutput> {
    let spec = SyntheticSpec::from_kv(kv)?;
    let ratios = split_ratios(kv)?;
    let mut config = spec.to_kv();
    config.set(
        "split_ratios",
        ratios.map(|r| r.to_string()).join(","),
    );
    let dataset = generate_synthetic_dataset(&spec)?;
    let (train, val, test) = split_by_patient(&dataset.manifest, ratios, spec.seed)?;
    create_dir(out)?;
    let manifest = write_synthetic_dataset(out, &dataset)?;
    let mut record = RunRecord::new("synth", config.hash(), Some(spec.seed));
    record.output(&manifest);
    let mut paths = Vec::new();
    for (name, m) in [(TRAIN_FILE, &train), (VAL_FILE, &val), (TEST_FILE, &test)] {
        let path = out.join(name);
        write_manifest(&path, m)?;
        record.output(&path);
        paths.push(path);
    }
    record.write(out)?;
    let [train, val, test]: [PathBuf; 3] = paths.try_into().expect("three splits");
    Ok(SynthOutput {
        manifest,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub checkpoint: PathBuf,
    pub features: PathBuf,
    pub checkpoint_hash: String,
    /// The existing checkpoint matched config and data and was kept.
    pub reused_checkpoint: bool,
    /// The existing feature cache was keyed by the same checkpoint and kept.
    pub reused_features: bool,
}

/// Trains the slice classifier on `train` (best epoch by loss on `val`) and
/// caches norm-3 pooled embeddings of every training volume.
pub fn embed(out: &Path, train: &Path, val: Option<&Path>, kv: &KvConfig) -> Result<EmbedOutput> {
    let config = BackboneConfig::from_kv(kv)?;
    let config_hash = config.to_kv().hash();
    let mut record = RunRecord::new("embed", config_hash.clone(), Some(config.seed));
    let train_hash = record.input(train)?;
    let train_manifest = load_manifest(train)?;
    if train_manifest.is_empty() {
        return Err(Error::Precondition("training manifest is empty".into()));
    }
    let val_manifest = val.map(load_manifest).transpose()?;
    if let Some(v) = val {
        record.input(v)?;
    }
    create_dir(out)?;
    let checkpoint = out.join(BACKBONE_FILE);
    let features = out.join(FEATURES_FILE);

    let mut provenance = KvConfig::new();
    provenance.set("train_manifest_hash", &train_hash);
    if let Some(v) = val {
        provenance.set("val_manifest_hash", crate::run_record::file_hash(v)?);
    }

    let existing = checkpoint
        .exists()
        .then(|| load_backbone(&checkpoint))
        .transpose()
        .ok()
        .flatten()
        .filter(|(_, sidecar, _)| {
            sidecar.get("config_hash") == Some(config_hash.as_str())
                && provenance
                    .keys()
                    .all(|k| sidecar.get(k) == provenance.get(k))
                && sidecar.get("val_manifest_hash").is_some() == val.is_some()
        });
    let train_volumes = load_volumes(&train_manifest)?;
    let reused_checkpoint = existing.is_some();
    let (backbone, checkpoint_hash) = match existing {
        Some((model, _, hash)) => (model, hash),
        None => {
            let val_volumes = val_manifest.as_ref().map(load_volumes).transpose()?;
            let run = train_backbone(
                &train_manifest,
                &train_volumes,
                val_manifest.as_ref().zip(val_volumes.as_deref()),
                &config,
            )?;
            let hash = save_backbone(&checkpoint, &run.model, &provenance)?;
            (run.model, hash)
        }
    };

    let ids: HashSet<&str> = train_manifest
        .records
        .iter()
        .map(|r| r.volume_id.as_str())
        .collect();
    let reused_features = features.exists()
        && read_feature_cache(&features).is_ok_and(|(hash, cached)| {
            hash == checkpoint_hash
                && cached.len() == ids.len()
                && cached.iter().all(|e| ids.contains(e.volume_id.as_str()))
        });
    if !reused_features {
        let embeddings = train_manifest
            .records
            .iter()
            .zip(&train_volumes)
            .map(|(r, v)| embed_volume(&backbone, &r.volume_id, v))
            .collect::<Result<Vec<_>>>()?;
        write_feature_cache(&features, &checkpoint_hash, &embeddings)?;
    }
    record.output(&checkpoint);
    record.output(&features);
    record.write(out)?;
    Ok(EmbedOutput {
        checkpoint,
        features,
        checkpoint_hash,
        reused_checkpoint,
        reused_features,
    })
}

#[derive(Debug, Clone)]
pub struct LabelOutput {
    pub manifest: PathBuf,
    pub assignment_log: PathBuf,
    /// Sizes of G^l, G^u, N^l, N^u.
    pub group_counts: [usize; 4],
    pub assignments: Vec<SurrogateAssignment>,
}

/// Surrogate VF labels for the VF-less volumes of a training manifest.
pub fn label(out: &Path, features: &Path, manifest: &Path) -> Result<LabelOutput> {
    let mut record = RunRecord::new("label", KvConfig::new().hash(), None);
    let cache_hash = record.input(features)?;
    record.input(manifest)?;
    let (_, embeddings) = read_feature_cache(features)?;
    let train = load_manifest(manifest)?;
    let partition = partition_groups(&train, &embeddings)?;
    let (assignments, labeled) = assign_surrogates(&train, &partition)?;
    create_dir(out)?;
    let manifest_out = out.join(LABELED_FILE);
    let log = out.join(ASSIGNMENTS_FILE);
    write_manifest(&manifest_out, &labeled)?;
    write_assignment_log(&log, &assignments)?;
    record.config_hash = cache_hash;
    record.output(&manifest_out);
    record.output(&log);
    record.write(out)?;
    Ok(LabelOutput {
        manifest: manifest_out,
        assignment_log: log,
        group_counts: partition.counts(),
        assignments,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PathBuf,
    pub log: PathBuf,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

/// Config keys that may change when a run is resumed.
const RESUMABLE_KEYS: [&str; 2] = ["epochs", "patience"];

fn load_split(path: &Path) -> Result<(DatasetManifest, Vec<octscreen::data_model::Volume>)> {
    let manifest = load_manifest(path)?;
    let volumes = load_volumes(&manifest)?;
    Ok((manifest, volumes))
}

/// Trains the multi-task network; with `resume`, continues the state saved
/// in `out` by an earlier call, keeping its configuration except for the
/// epoch budget and patience.
pub fn train(out: &Path, train: &Path, val: &Path, kv: &KvConfig, resume: bool) -> Result<TrainOutput> {
    let state_path = out.join(STATE_FILE);
    let log_path = out.join(LOG_FILE);
    let (state, config) = if resume {
        if !state_path.exists() {
            return Err(Error::Precondition(format!(
                "nothing to resume: {} does not exist",
                state_path.display()
            )));
        }
        let (state, saved) = TrainState::load(&state_path, &log_path)?;
        let mut merged = saved.to_kv();
        merged.merge(kv);
        let config = TrainConfig::from_kv(&merged)?;
        let frozen = |c: &TrainConfig| {
            let mut k = c.to_kv();
            for key in RESUMABLE_KEYS {
                k.set(key, "");
            }
            k
        };
        if frozen(&config) != frozen(&saved) {
            return Err(Error::invalid(
                "resume",
                "only epochs and patience may change when resuming",
            ));
        }
        (state, config)
    } else {
        let config = TrainConfig::from_kv(kv)?;
        (TrainState::new(&config), config)
    };

    let mut record = RunRecord::new("train", config.to_kv().hash(), Some(config.seed));
    record.input(train)?;
    record.input(val)?;
    if resume {
        record.input(&state_path)?;
    }
    let (train_m, train_v) = load_split(train)?;
    let (val_m, val_v) = load_split(val)?;
    create_dir(out)?;
    let run = continue_training(
        state,
        LabeledVolumes::new(&train_m, &train_v)?,
        LabeledVolumes::new(&val_m, &val_v)?,
        &config,
        |s| s.save(&state_path, &log_path, &config).map(drop),
    )?;
    run.state.save(&state_path, &log_path, &config)?;

    let model = out.join(MODEL_FILE);
    let mut extra = config.to_kv();
    if let Some(b) = &run.state.best {
        extra.set("best_epoch", b.epoch);
        extra.set("best_val_auc", b.val_auc);
    }
    run.net.save(&model, &extra)?;
    for p in [&model, &log_path, &state_path] {
        record.output(p);
    }
    record.write(out)?;
    Ok(TrainOutput {
        model,
        log: log_path,
        best_epoch: run.best_epoch,
        epochs_run: run.log.len(),
    })
}

/// Scores `model` on a labeled manifest; writes the report and per-volume
/// predictions.
pub fn eval(out: &Path, test: &Path, model: &Path) -> Result<MetricsReport> {
    let mut record = RunRecord::new("eval", String::new(), None);
    record.input(test)?;
    let model_hash = record.input(model)?;
    record.config_hash = model_hash;
    let (manifest, volumes) = load_split(test)?;
    if manifest.is_empty() {
        return Err(Error::Precondition("test manifest is empty".into()));
    }
    let (net, sidecar, _) = MtlNetwork::load(model)?;
    record.seed = sidecar.parsed("seed", 0u64).ok();
    let predictions = predict_all(&net, LabeledVolumes::new(&manifest, &volumes)?)?;
    let report = report_from_predictions(&manifest, &predictions)?;
    create_dir(out)?;
    let metrics = out.join(METRICS_FILE);
    report.write(&metrics)?;
    let preds = out.join(PREDICTIONS_FILE);
    fs::write(&preds, predictions_csv(&predictions)).map_err(|e| Error::io(&preds, e))?;
    record.output(&metrics);
    record.output(&preds);
    record.write(out)?;
    Ok(report)
}

fn predictions_csv(predictions: &BTreeMap<String, octscreen::training::VolumePrediction>) -> String {
    let mut s = String::from("volume_id,probability,vfi,md,psd\n");
    for (id, p) in predictions {
        let _ = writeln!(
            s,
            "{id},{},{},{},{}",
            p.probability, p.vf.vfi, p.vf.md, p.vf.psd
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct CamOutput {
    pub heatmap: CamHeatmap,
    pub center: usize,
    pub heatmap_png: PathBuf,
    pub overlay_png: PathBuf,
}

/// Glaucoma activation map of one triplet of `volume_id` (default: the
/// middle one).
pub fn cam(
    out: &Path,
    manifest: &Path,
    model: &Path,
    volume_id: &str,
    center: Option<usize>,
) -> Result<CamOutput> {
    let mut record = RunRecord::new("cam", String::new(), None);
    record.input(manifest)?;
    record.config_hash = record.input(model)?;
    let m = load_manifest(manifest)?;
    let r = m
        .get(volume_id)
        .ok_or_else(|| Error::invalid("volume_id", format!("'{volume_id}' not in manifest")))?;
    let volume = octscreen::data_model::read_volume(&r.data_path)?;
    let triplets = make_bscan_triplets(volume_id, &volume)?;
    let center = center.unwrap_or(volume.n_slices() / 2);
    let triplet = triplets
        .iter()
        .find(|t| t.center_index == center)
        .ok_or_else(|| {
            Error::invalid(
                "center",
                format!("{center} is not a triplet centre of a {}-slice volume", volume.n_slices()),
            )
        })?;
    let (net, _, _) = MtlNetwork::load(model)?;
    let heatmap = compute_cam(&net, triplet)?;
    create_dir(out)?;
    let heatmap_png = out.join(format!("cam_{volume_id}_c{center}.png"));
    let overlay_png = out.join(format!("overlay_{volume_id}_c{center}.png"));
    write_cam_png(&heatmap_png, &heatmap)?;
    write_overlay_png(
        &overlay_png,
        triplet.slices.index_axis(Axis(0), 1),
        &heatmap,
    )?;
    record.output(&heatmap_png);
    record.output(&overlay_png);
    record.write(out)?;
    Ok(CamOutput {
        heatmap,
        center,
        heatmap_png,
        overlay_png,
    })
}
