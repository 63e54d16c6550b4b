use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::data_model::{DatasetManifest, Volume};
use crate::error::{Error, Result};
use crate::mtl_model::loss::{classification_grad_logits, classification_loss};
use crate::nn::ops::{global_avg_pool, global_avg_pool_backward, sigmoid};
use crate::nn::{
    read_checkpoint, write_checkpoint, ConvBnRelu, ConvBnReluCache, Linear, Module, ParamMut,
    ParamRef, Sgd, TensorMap, Trunk, TrunkCache, TrunkConfig,
};
use crate::training::epoch_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    /// Width of the pooled feature vector.
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_width: 8,
            block_widths: vec![16, 32],
            embed_dim: 512,
            epochs: 4,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = BackboneConfig::default();
        let cfg = BackboneConfig {
            stem_width: kv.parsed("stem_width", d.stem_width)?,
            block_widths: kv.parsed_list("block_widths", d.block_widths)?,
            embed_dim: kv.parsed("embed_dim", d.embed_dim)?,
            epochs: kv.parsed("backbone_epochs", d.epochs)?,
            batch_size: kv.parsed("backbone_batch_size", d.batch_size)?,
            lr: kv.parsed("backbone_lr", d.lr)?,
            momentum: kv.parsed("momentum", d.momentum)?,
            weight_decay: kv.parsed("weight_decay", d.weight_decay)?,
            seed: kv.parsed("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stem_width", self.stem_width);
        kv.set("block_widths", join(&self.block_widths));
        kv.set("embed_dim", self.embed_dim);
        kv.set("backbone_epochs", self.epochs);
        kv.set("backbone_batch_size", self.batch_size);
        kv.set("backbone_lr", self.lr);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.block_widths.contains(&0) {
            return Err(Error::invalid("block_widths", "layer widths must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("backbone_batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("backbone_lr", "must be positive"));
        }
        Ok(())
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            in_channels: 1,
            stem_width: self.stem_width,
            block_widths: self.block_widths.clone(),
        }
    }
}

pub(crate) fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Single-slice classifier: residual trunk, 1x1 projection to `embed_dim`
/// channels with ReLU, global average pool, linear glaucoma logit.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub input_size: (usize, usize),
    pub trunk: Trunk,
    pub projection: ConvBnRelu,
    pub head: Linear,
}

struct BackboneCache {
    trunk: TrunkCache,
    projection: ConvBnReluCache,
    pooled: Array2<f64>,
    map_size: (usize, usize),
}

impl Backbone {
    pub fn new(config: BackboneConfig, input_size: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let trunk_cfg = config.trunk();
        let trunk = Trunk::new(trunk_cfg.clone(), &mut rng);
        let projection = ConvBnRelu::new(trunk_cfg.out_channels(), config.embed_dim, 1, 1, &mut rng);
        let head = Linear::new(config.embed_dim, 1, &mut rng);
        Backbone {
            config,
            input_size,
            trunk,
            projection,
            head,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.input_size {
            return Err(Error::Shape(format!(
                "backbone expects 1x{}x{} slices, got {c}x{h}x{w}",
                self.input_size.0, self.input_size.1
            )));
        }
        Ok(())
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> (Vec<f64>, BackboneCache) {
        let (t, trunk) = self.trunk.forward(x);
        let (p, projection) = self.projection.forward(&t);
        let map_size = (p.dim().2, p.dim().3);
        let pooled = global_avg_pool(&p);
        let logits = self.head.forward(&pooled).column(0).to_vec();
        (
            logits,
            BackboneCache {
                trunk,
                projection,
                pooled,
                map_size,
            },
        )
    }

    fn backward(&mut self, cache: &BackboneCache, dlogits: &[f64]) {
        let dy = Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec()).expect("sized");
        let dpooled = self.head.backward(&cache.pooled, &dy);
        let dmap = global_avg_pool_backward(&dpooled, cache.map_size.0, cache.map_size.1);
        let dt = self.projection.backward(&cache.projection, &dmap);
        self.trunk.backward(&cache.trunk, &dt);
    }

    /// Pooled features `(N, embed_dim)` in inference mode.
    pub fn features(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(global_avg_pool(&self.projection.infer(&self.trunk.infer(x))))
    }

    pub fn predict_proba(&self, x: &Array4<f64>) -> Result<Vec<f64>> {
        let f = self.features(x)?;
        Ok(self.head.forward(&f).column(0).iter().map(|&z| sigmoid(z)).collect())
    }
}

impl Module for Backbone {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.trunk.visit_mut(&crate::nn::join_name(prefix, "trunk"), f);
        self.projection.visit_mut(&crate::nn::join_name(prefix, "projection"), f);
        self.head.visit_mut(&crate::nn::join_name(prefix, "head"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.trunk.visit(&crate::nn::join_name(prefix, "trunk"), f);
        self.projection.visit(&crate::nn::join_name(prefix, "projection"), f);
        self.head.visit(&crate::nn::join_name(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BackboneRun {
    /// Parameters of the epoch with the lowest validation loss (or the last
    /// epoch when no validation data was given).
    pub model: Backbone,
    pub best_epoch: Option<usize>,
    pub log: Vec<BackboneEpoch>,
}

fn slice_batch(volumes: &[Volume], items: &[(usize, usize)]) -> Array4<f64> {
    let (h, w) = (volumes[items[0].0].height(), volumes[items[0].0].width());
    let mut x = Array4::zeros((items.len(), 1, h, w));
    for (b, &(v, z)) in items.iter().enumerate() {
        x.slice_mut(s![b, 0, .., ..])
            .assign(&volumes[v].slice(z).mapv(f64::from));
    }
    x
}

fn slice_items(volumes: &[Volume]) -> Vec<(usize, usize)> {
    volumes
        .iter()
        .enumerate()
        .flat_map(|(v, vol)| (0..vol.n_slices()).map(move |z| (v, z)))
        .collect()
}

fn common_size(volumes: &[Volume]) -> Result<(usize, usize)> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Precondition("no volumes".into()))?;
    let size = (first.height(), first.width());
    if volumes.iter().any(|v| (v.height(), v.width()) != size) {
        return Err(Error::Shape("volumes have differing slice sizes".into()));
    }
    Ok(size)
}

fn mean_loss(model: &Backbone, volumes: &[Volume], labels: &[f64], batch: usize) -> Result<f64> {
    let items = slice_items(volumes);
    let mut total = 0.0;
    for chunk in items.chunks(batch) {
        let probs = model.predict_proba(&slice_batch(volumes, chunk))?;
        let y: Vec<f64> = chunk.iter().map(|&(v, _)| labels[v]).collect();
        total += classification_loss(&probs, &y)? * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Trains the slice classifier with binary cross-entropy; every B-scan
/// inherits its volume's class label.
pub fn train_backbone(
    train: &DatasetManifest,
    train_volumes: &[Volume],
    val: Option<(&DatasetManifest, &[Volume])>,
    config: &BackboneConfig,
) -> Result<BackboneRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("training manifest is empty".into()));
    }
    if train.len() != train_volumes.len() {
        return Err(Error::Shape("manifest and volume list lengths differ".into()));
    }
    let labels: Vec<f64> = train.records.iter().map(|r| r.class_label.target()).collect();
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Precondition(
            "training set contains a single class".into(),
        ));
    }
    let size = common_size(train_volumes)?;
    let val_labels: Option<Vec<f64>> =
        val.map(|(m, _)| m.records.iter().map(|r| r.class_label.target()).collect());

    let mut model = Backbone::new(config.clone(), size);
    let mut best: Option<(f64, usize, Backbone)> = None;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut items = slice_items(train_volumes);

    for epoch in 0..config.epochs {
        items.sort_unstable();
        items.shuffle(&mut epoch_rng(config.seed, epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in items.chunks(config.batch_size) {
            let x = slice_batch(train_volumes, chunk);
            let y: Vec<f64> = chunk.iter().map(|&(v, _)| labels[v]).collect();
            model.zero_grad();
            let (logits, cache) = model.forward_train(&x);
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let loss = classification_loss(&probs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += probs
                .iter()
                .zip(&y)
                .filter(|(&p, &t)| (p >= 0.5) == (t == 1.0))
                .count();
            model.backward(&cache, &classification_grad_logits(&probs, &y));
            sgd.step(&mut model, config.lr);
        }
        let train_loss = loss_sum / items.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        let val_loss = match (val, &val_labels) {
            (Some((_, vols)), Some(vl)) if !vols.is_empty() => {
                Some(mean_loss(&model, vols, vl, config.batch_size.max(64))?)
            }
            _ => None,
        };
        log.push(BackboneEpoch {
            epoch,
            train_loss,
            train_acc: correct as f64 / items.len() as f64,
            val_loss,
        });
        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.clone()));
            }
        }
    }

    Ok(match best {
        Some((_, epoch, m)) => BackboneRun {
            model: m,
            best_epoch: Some(epoch),
            log,
        },
        None => BackboneRun {
            best_epoch: config.epochs.checked_sub(1),
            model,
            log,
        },
    })
}

/// One feature vector per B-scan, in slice order.
pub fn extract_bscan_features(backbone: &Backbone, volume: &Volume) -> Result<Vec<Vec<f64>>> {
    if (volume.height(), volume.width()) != backbone.input_size {
        return Err(Error::Shape(format!(
            "slices are {}x{}, backbone was trained on {}x{}",
            volume.height(),
            volume.width(),
            backbone.input_size.0,
            backbone.input_size.1
        )));
    }
    let volumes = std::slice::from_ref(volume);
    let items = slice_items(volumes);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let f = backbone.features(&slice_batch(volumes, chunk))?;
        out.extend(f.axis_iter(Axis(0)).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Writes the checkpoint blob plus a sidecar recording the configuration,
/// `embed_dim`, config hash, seed, input size and any `extra` keys. Returns
/// the blob hash.
pub fn save_backbone(path: &Path, model: &Backbone, extra: &KvConfig) -> Result<String> {
    let mut sidecar = extra.clone();
    sidecar.merge(&model.config.to_kv());
    sidecar.set("config_hash", model.config.to_kv().hash());
    sidecar.set("input_height", model.input_size.0);
    sidecar.set("input_width", model.input_size.1);
    write_checkpoint(path, &TensorMap::from_module(model), &sidecar)
}

/// Loads a checkpoint written by [`save_backbone`]; also returns its
/// sidecar and hash.
pub fn load_backbone(path: &Path) -> Result<(Backbone, KvConfig, String)> {
    let (tensors, sidecar, hash) = read_checkpoint(path)?;
    let config = BackboneConfig::from_kv(&sidecar)?;
    let size = (
        sidecar.parsed("input_height", 0usize)?,
        sidecar.parsed("input_width", 0usize)?,
    );
    let mut model = Backbone::new(config, size);
    tensors.load_into(&mut model)?;
    Ok((model, sidecar, hash))
}
