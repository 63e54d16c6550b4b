//! Stage-2 training: batches of B-scan triplets with class and (masked) VF
//! supervision, SGD on the joint loss, model selection by validation AUC,
//! resumable state and volume-level inference.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::data_model::{
    triplet_centers, DatasetManifest, VfMeasurement, VfProvenance, Volume,
};
use crate::error::{Error, Result};
use crate::evaluation::compute_metrics;
use crate::mtl_model::{loss_and_grad, LossWeights, MtlArchitecture, MtlNetwork, Supervision};
use crate::nn::{read_checkpoint, write_checkpoint, Sgd, StepSchedule, TensorMap};

/// Independent random stream for one epoch of a seeded run.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Classification only; every regression target is masked out.
    SingleTask,
    /// Joint training using measured VF only.
    Mt,
    /// Joint training using measured and surrogate VF; absent VF is an error.
    Semt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::SingleTask, TrainMode::Mt, TrainMode::Semt];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SingleTask => "single_task",
            TrainMode::Mt => "mt",
            TrainMode::Semt => "semt",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| format!("unknown mode '{s}' (expected single_task, mt or semt)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    /// Total number of epochs, counting epochs completed before a resume.
    pub epochs: usize,
    pub schedule: StepSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: LossWeights,
    pub seed: u64,
    /// Stop after this many epochs without a validation AUC improvement; 0 disables.
    pub patience: usize,
    pub hflip: bool,
    /// Triplets drawn per training volume and epoch; 0 uses all of them.
    pub triplets_per_volume: usize,
    pub arch: MtlArchitecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Semt,
            batch_size: 16,
            epochs: 10,
            schedule: StepSchedule {
                base: 0.02,
                step: 0,
                gamma: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: LossWeights::default(),
            seed: 0,
            patience: 0,
            hflip: false,
            triplets_per_volume: 0,
            arch: MtlArchitecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let mode = match kv.get("mode") {
            Some(m) => m.parse().map_err(|e| Error::invalid("mode", e))?,
            None => d.mode,
        };
        let cfg = TrainConfig {
            mode,
            batch_size: kv.parsed("batch_size", d.batch_size)?,
            epochs: kv.parsed("epochs", d.epochs)?,
            schedule: StepSchedule {
                base: kv.parsed("lr", d.schedule.base)?,
                step: kv.parsed("lr_step", d.schedule.step)?,
                gamma: kv.parsed("lr_gamma", d.schedule.gamma)?,
            },
            momentum: kv.parsed("momentum", d.momentum)?,
            weight_decay: kv.parsed("weight_decay", d.weight_decay)?,
            alpha: LossWeights::new([
                kv.parsed("alpha_vfi", 1.0)?,
                kv.parsed("alpha_md", 1.0)?,
                kv.parsed("alpha_psd", 1.0)?,
            ])?,
            seed: kv.parsed("seed", d.seed)?,
            patience: kv.parsed("patience", d.patience)?,
            hflip: kv.parsed("hflip", d.hflip)?,
            triplets_per_volume: kv.parsed("triplets_per_volume", d.triplets_per_volume)?,
            arch: MtlArchitecture::from_kv(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.arch.to_kv();
        kv.set("mode", self.mode);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("lr", self.schedule.base);
        kv.set("lr_step", self.schedule.step);
        kv.set("lr_gamma", self.schedule.gamma);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("alpha_vfi", self.alpha.alpha[0]);
        kv.set("alpha_md", self.alpha.alpha[1]);
        kv.set("alpha_psd", self.alpha.alpha[2]);
        kv.set("seed", self.seed);
        kv.set("patience", self.patience);
        kv.set("hflip", self.hflip);
        kv.set("triplets_per_volume", self.triplets_per_volume);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.schedule.base.is_finite() && self.schedule.base > 0.0) {
            return Err(Error::invalid("lr", "must be a positive number"));
        }
        if !(self.schedule.gamma.is_finite() && self.schedule.gamma > 0.0) {
            return Err(Error::invalid("lr_gamma", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// A manifest together with its loaded voxel data (same order).
#[derive(Debug, Clone, Copy)]
pub struct LabeledVolumes<'a> {
    pub manifest: &'a DatasetManifest,
    pub volumes: &'a [Volume],
}

impl<'a> LabeledVolumes<'a> {
    pub fn new(manifest: &'a DatasetManifest, volumes: &'a [Volume]) -> Result<Self> {
        if manifest.len() != volumes.len() {
            return Err(Error::Shape(format!(
                "manifest lists {} volumes but {} were loaded",
                manifest.len(),
                volumes.len()
            )));
        }
        Ok(LabeledVolumes { manifest, volumes })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg_vfi: f64,
    pub l_reg_md: f64,
    pub l_reg_psd: f64,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serialises")
    }
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_auc: f64,
    pub net: MtlNetwork,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: MtlNetwork,
    pub optimizer: Sgd,
    pub next_epoch: usize,
    pub best: Option<BestCheckpoint>,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            net: MtlNetwork::new(config.arch.clone(), config.seed),
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            next_epoch: 0,
            best: None,
            log: Vec::new(),
        }
    }

    /// Parameters to hand out: the best validated epoch, else the latest.
    pub fn selected(&self) -> &MtlNetwork {
        self.best.as_ref().map_or(&self.net, |b| &b.net)
    }

    fn epochs_since_best(&self) -> usize {
        match &self.best {
            Some(b) => self.next_epoch - 1 - b.epoch,
            None => self.next_epoch,
        }
    }

    /// Writes the state to `path` (tensor blob plus sidecar) and the epoch
    /// log to `log_path` as JSON lines.
    pub fn save(&self, path: &Path, log_path: &Path, config: &TrainConfig) -> Result<String> {
        let mut tensors = TensorMap::default();
        for (prefix, net) in [("current", Some(&self.net)), ("best", self.best.as_ref().map(|b| &b.net))] {
            if let Some(net) = net {
                for (name, (shape, values)) in TensorMap::from_module(net).tensors {
                    tensors.insert(format!("{prefix}.{name}"), shape, values);
                }
            }
        }
        for (name, v) in &self.optimizer.velocity {
            tensors.insert(format!("velocity.{name}"), vec![v.len()], v.clone());
        }
        let mut sidecar = config.to_kv();
        sidecar.set("next_epoch", self.next_epoch);
        if let Some(b) = &self.best {
            sidecar.set("best_epoch", b.epoch);
            sidecar.set("best_val_auc", format!("{:e}", b.val_auc));
        }
        let hash = write_checkpoint(path, &tensors, &sidecar)?;
        let text: String = self
            .log
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect();
        fs::write(log_path, text).map_err(|e| Error::io(log_path, e))?;
        Ok(hash)
    }

    /// Loads a state saved by [`TrainState::save`] together with its config.
    pub fn load(path: &Path, log_path: &Path) -> Result<(Self, TrainConfig)> {
        let (tensors, sidecar, _) = read_checkpoint(path)?;
        let config = TrainConfig::from_kv(&sidecar)?;
        let mut net = MtlNetwork::new(config.arch.clone(), config.seed);
        tensors.subset("current").load_into(&mut net)?;
        let best = match sidecar.get("best_epoch") {
            Some(_) => {
                let mut b = MtlNetwork::new(config.arch.clone(), config.seed);
                tensors.subset("best").load_into(&mut b)?;
                Some(BestCheckpoint {
                    epoch: sidecar.parsed("best_epoch", 0)?,
                    val_auc: sidecar.parsed("best_val_auc", 0.0)?,
                    net: b,
                })
            }
            None => None,
        };
        let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
        for (name, (_, values)) in tensors.subset("velocity").tensors {
            optimizer.velocity.insert(name, values);
        }
        let text = fs::read_to_string(log_path).map_err(|e| Error::io(log_path, e))?;
        let log = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(log_path, e.to_string())))
            .collect::<Result<Vec<EpochRecord>>>()?;
        let state = TrainState {
            net,
            optimizer,
            next_epoch: sidecar.parsed("next_epoch", 0)?,
            best,
            log,
        };
        Ok((state, config))
    }
}

/// Per-volume supervision under a training mode: label, normalised VF and mask.
pub fn supervision_targets(
    manifest: &DatasetManifest,
    mode: TrainMode,
) -> Result<Vec<(f64, [f64; 3], [bool; 3])>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let usable = match mode {
                TrainMode::SingleTask => false,
                TrainMode::Mt => r.vf_provenance == VfProvenance::Measured,
                TrainMode::Semt => {
                    if r.vf.is_none() {
                        return Err(Error::Precondition(format!(
                            "mode semt needs VF for every training volume; '{}' has none \
                             (run surrogate labelling first)",
                            r.volume_id
                        )));
                    }
                    true
                }
            };
            let target = match (&r.vf, usable) {
                (Some(vf), true) => vf.normalize()?,
                _ => [0.0; 3],
            };
            Ok((r.class_label.target(), target, [usable; 3]))
        })
        .collect()
}

fn triplet_batch(volumes: &[Volume], items: &[(usize, usize)], flips: &[bool]) -> Array4<f64> {
    let (h, w) = (volumes[items[0].0].height(), volumes[items[0].0].width());
    let mut x = Array4::zeros((items.len(), 3, h, w));
    for (b, &(v, c)) in items.iter().enumerate() {
        for k in 0..3 {
            let src = volumes[v].slice(c + k - 1).mapv(f64::from);
            let mut dst = x.slice_mut(s![b, k, .., ..]);
            if flips.get(b).copied().unwrap_or(false) {
                dst.assign(&src.slice(s![.., ..;-1]));
            } else {
                dst.assign(&src);
            }
        }
    }
    x
}

fn epoch_items(
    volumes: &[Volume],
    per_volume: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut items = Vec::new();
    for (v, vol) in volumes.iter().enumerate() {
        let mut centers: Vec<usize> = triplet_centers(vol.n_slices())?.collect();
        if per_volume > 0 && per_volume < centers.len() {
            centers.shuffle(rng);
            centers.truncate(per_volume);
            centers.sort_unstable();
        }
        items.extend(centers.into_iter().map(|c| (v, c)));
    }
    items.shuffle(rng);
    Ok(items)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Parameters of the epoch with the best validation AUC (the latest
    /// parameters when no epoch produced an AUC).
    pub net: MtlNetwork,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Trains from scratch; see [`continue_training`].
pub fn train_mtl(
    train: LabeledVolumes<'_>,
    val: LabeledVolumes<'_>,
    config: &TrainConfig,
) -> Result<TrainRun> {
    continue_training(TrainState::new(config), train, val, config, |_| Ok(()))
}

/// Runs epochs `state.next_epoch..config.epochs`, calling `on_epoch` after
/// every epoch (used for checkpointing). Epoch `e` draws its shuffling and
/// augmentation from [`epoch_rng`]`(seed, e)`, so a resumed run matches an
/// uninterrupted one.
pub fn continue_training(
    mut state: TrainState,
    train: LabeledVolumes<'_>,
    val: LabeledVolumes<'_>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainRun> {
    config.validate()?;
    if train.manifest.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    if val.manifest.is_empty() {
        return Err(Error::Precondition("validation split is empty".into()));
    }
    let targets = supervision_targets(train.manifest, config.mode)?;
    let weights = match config.mode {
        TrainMode::SingleTask => LossWeights::zero(),
        _ => config.alpha,
    };
    let val_labels: Vec<f64> = val
        .manifest
        .records
        .iter()
        .map(|r| r.class_label.target())
        .collect();

    while state.next_epoch < config.epochs {
        if config.patience > 0 && state.best.is_some() && state.epochs_since_best() >= config.patience {
            break;
        }
        let epoch = state.next_epoch;
        let mut rng = epoch_rng(config.seed, epoch as u64);
        let items = epoch_items(train.volumes, config.triplets_per_volume, &mut rng)?;
        let lr = config.schedule.rate(epoch);
        let mut sums = [0.0f64; 4];
        for chunk in items.chunks(config.batch_size) {
            let flips: Vec<bool> = if config.hflip {
                chunk.iter().map(|_| rng.random_bool(0.5)).collect()
            } else {
                Vec::new()
            };
            let x = triplet_batch(train.volumes, chunk, &flips);
            let labels: Vec<f64> = chunk.iter().map(|&(v, _)| targets[v].0).collect();
            let vf: Vec<[f64; 3]> = chunk.iter().map(|&(v, _)| targets[v].1).collect();
            let mask: Vec<[bool; 3]> = chunk.iter().map(|&(v, _)| targets[v].2).collect();
            let sup = Supervision {
                labels: &labels,
                vf_target: &vf,
                mask: &mask,
            };
            let l = loss_and_grad(&mut state.net, &x, &sup, &weights)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: l.total,
                });
            }
            let n = chunk.len() as f64;
            sums[0] += l.l_cls * n;
            for j in 0..3 {
                sums[j + 1] += l.l_reg[j] * n;
            }
            state.optimizer.step(&mut state.net, lr);
        }
        let n = items.len().max(1) as f64;

        let probs = val
            .volumes
            .iter()
            .map(|v| predict_volume(&state.net, v).map(|p| p.probability))
            .collect::<Result<Vec<f64>>>()?;
        let m = compute_metrics(&probs, &val_labels, 0.5)?;
        let record = EpochRecord {
            epoch,
            l_cls: sums[0] / n,
            l_reg_vfi: sums[1] / n,
            l_reg_md: sums[2] / n,
            l_reg_psd: sums[3] / n,
            val_auc: m.auc,
            val_acc: Some(m.accuracy),
        };
        if let Some(auc) = m.auc {
            if state.best.as_ref().is_none_or(|b| auc > b.val_auc) {
                state.best = Some(BestCheckpoint {
                    epoch,
                    val_auc: auc,
                    net: state.net.clone(),
                });
            }
        }
        state.log.push(record);
        state.next_epoch += 1;
        on_epoch(&state)?;
    }

    Ok(TrainRun {
        net: state.selected().clone(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        log: state.log.clone(),
        state,
    })
}

/// Volume-level prediction: triplet outputs averaged over all centres.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub probability: f64,
    /// Mean of the normalised triplet VF predictions.
    pub vf_normalized: [f64; 3],
    /// `vf_normalized` mapped back to clinical units.
    pub vf: VfMeasurement,
}

/// Class probability and normalised VF for every triplet, in centre order.
pub fn triplet_predictions(net: &MtlNetwork, volume: &Volume) -> Result<Vec<(f64, [f64; 3])>> {
    let items: Vec<(usize, usize)> = triplet_centers(volume.n_slices())?
        .map(|c| (0, c))
        .collect();
    let volumes = std::slice::from_ref(volume);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let o = net.infer(&triplet_batch(volumes, chunk, &[]))?;
        out.extend(o.class_prob.into_iter().zip(o.vf_pred));
    }
    Ok(out)
}

pub fn predict_volume(net: &MtlNetwork, volume: &Volume) -> Result<VolumePrediction> {
    let preds = triplet_predictions(net, volume)?;
    let n = preds.len() as f64;
    let probability = preds.iter().map(|p| p.0).sum::<f64>() / n;
    let vf_normalized: [f64; 3] =
        std::array::from_fn(|j| preds.iter().map(|p| p.1[j]).sum::<f64>() / n);
    Ok(VolumePrediction {
        probability,
        vf: VfMeasurement::denormalize(vf_normalized)?,
        vf_normalized,
    })
}

/// Per-volume predictions for a whole manifest, keyed by volume id.
pub fn predict_all(
    net: &MtlNetwork,
    data: LabeledVolumes<'_>,
) -> Result<BTreeMap<String, VolumePrediction>> {
    data.manifest
        .records
        .iter()
        .zip(data.volumes)
        .map(|(r, v)| Ok((r.volume_id.clone(), predict_volume(net, v)?)))
        .collect()
}
