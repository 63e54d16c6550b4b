//! Multi-task network: a shared residual trunk feeding (a) a visual-field
//! regression branch and (b) a glaucoma classifier that sees the trunk's
//! feature maps concatenated with the regression branch's maps.

pub mod loss;

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{
    classification_loss, regression_loss, total_loss, LossWeights, PROB_EPS,
};

use crate::config::KvConfig;
use crate::data_model::BscanTriplet;
use crate::error::{Error, Result};
use crate::nn::ops::{
    concat_channels, global_avg_pool, global_avg_pool_backward, sigmoid, split_channels,
};
use crate::nn::{
    join_name, read_checkpoint, write_checkpoint, ConvBnRelu, ConvBnReluCache, Linear, Module,
    ParamMut, ParamRef, TensorMap, Trunk, TrunkCache, TrunkConfig,
};

/// Checkpoint prefix of the shared trunk parameters.
pub const SHARED: &str = "shared";
/// Checkpoint prefix of the regression branch (convolutions and heads).
pub const REGRESSION: &str = "regression";
/// Checkpoint prefix of the classification head.
pub const CLASSIFICATION: &str = "classification";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MtlArchitecture {
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    /// Channels of both regression convolutions.
    pub reg_width: usize,
}

impl Default for MtlArchitecture {
    fn default() -> Self {
        MtlArchitecture {
            stem_width: 8,
            block_widths: vec![16, 32],
            reg_width: 16,
        }
    }
}

impl MtlArchitecture {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = MtlArchitecture::default();
        let stem_width = kv.parsed("stem_width", d.stem_width)?;
        let block_widths = kv.parsed_list("block_widths", d.block_widths)?;
        let trunk_out = block_widths.last().copied().unwrap_or(stem_width);
        let arch = MtlArchitecture {
            stem_width,
            block_widths,
            reg_width: kv.parsed("reg_width", (trunk_out / 2).max(1))?,
        };
        if arch.stem_width == 0 || arch.reg_width == 0 || arch.block_widths.contains(&0) {
            return Err(Error::invalid("block_widths", "layer widths must be positive"));
        }
        Ok(arch)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stem_width", self.stem_width);
        kv.set(
            "block_widths",
            self.block_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("reg_width", self.reg_width);
        kv
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            in_channels: 3,
            stem_width: self.stem_width,
            block_widths: self.block_widths.clone(),
        }
    }

    /// Channels seen by the classifier after concatenation.
    pub fn concat_channels(&self) -> usize {
        self.trunk().out_channels() + self.reg_width
    }
}

#[derive(Debug, Clone)]
pub struct RegressionBranch {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    /// One sigmoid unit per VF attribute (rows: VFI, MD, PSD).
    pub heads: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc: Linear,
}

#[derive(Debug, Clone)]
pub struct MtlNetwork {
    pub arch: MtlArchitecture,
    pub trunk: Trunk,
    pub regression: RegressionBranch,
    pub classifier: ClassifierHead,
}

/// Inference result for one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlOutput {
    /// Glaucoma likelihood.
    pub class_prob: f64,
    /// Normalised (VFI, MD, PSD) predictions.
    pub vf_pred: [f64; 3],
    /// Regression-branch activations after its second convolution.
    pub reg_feature_maps: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub class_logit: Vec<f64>,
    pub class_prob: Vec<f64>,
    pub vf_pred: Vec<[f64; 3]>,
}

pub struct MtlCache {
    trunk: TrunkCache,
    conv1: ConvBnReluCache,
    conv2: ConvBnReluCache,
    pooled_reg: Array2<f64>,
    pooled_concat: Array2<f64>,
    trunk_channels: usize,
    map_size: (usize, usize),
}

/// Feature maps produced in inference mode.
pub struct FeatureMaps {
    pub trunk: Array4<f64>,
    pub regression: Array4<f64>,
}

impl FeatureMaps {
    pub fn concatenated(&self) -> Array4<f64> {
        concat_channels(&self.trunk, &self.regression)
    }
}

fn head_outputs(
    regression: &RegressionBranch,
    classifier: &ClassifierHead,
    pooled_reg: &Array2<f64>,
    pooled_concat: &Array2<f64>,
) -> BatchOutput {
    let vf_logit = regression.heads.forward(pooled_reg);
    let class_logit: Vec<f64> = classifier.fc.forward(pooled_concat).column(0).to_vec();
    BatchOutput {
        class_prob: class_logit.iter().map(|&z| sigmoid(z)).collect(),
        class_logit,
        vf_pred: vf_logit
            .axis_iter(Axis(0))
            .map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])])
            .collect(),
    }
}

impl MtlNetwork {
    pub fn new(arch: MtlArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk_cfg = arch.trunk();
        let trunk = Trunk::new(trunk_cfg.clone(), &mut rng);
        let tc = trunk_cfg.out_channels();
        let regression = RegressionBranch {
            conv1: ConvBnRelu::new(tc, arch.reg_width, 3, 1, &mut rng),
            conv2: ConvBnRelu::new(arch.reg_width, arch.reg_width, 3, 1, &mut rng),
            heads: Linear::new(arch.reg_width, 3, &mut rng),
        };
        let classifier = ClassifierHead {
            fc: Linear::new(arch.concat_channels(), 1, &mut rng),
        };
        MtlNetwork {
            arch,
            trunk,
            regression,
            classifier,
        }
    }

    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != 3 || n == 0 || h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "expected a non-empty batch of 3-channel images, got {n}x{c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch statistics, running stats updated).
    pub fn forward_train(&mut self, x: &Array4<f64>) -> Result<(BatchOutput, MtlCache)> {
        self.check_input(x)?;
        let (t, trunk) = self.trunk.forward(x);
        let (r1, conv1) = self.regression.conv1.forward(&t);
        let (r, conv2) = self.regression.conv2.forward(&r1);
        let pooled_reg = global_avg_pool(&r);
        let pooled_concat = global_avg_pool(&concat_channels(&t, &r));
        let out = head_outputs(&self.regression, &self.classifier, &pooled_reg, &pooled_concat);
        Ok((
            out,
            MtlCache {
                trunk,
                conv1,
                conv2,
                pooled_reg,
                pooled_concat,
                trunk_channels: t.dim().1,
                map_size: (t.dim().2, t.dim().3),
            },
        ))
    }

    /// Accumulates parameter gradients given logit gradients of the loss.
    pub fn backward(&mut self, cache: &MtlCache, d_class_logit: &[f64], d_vf_logit: &[[f64; 3]]) {
        let n = d_class_logit.len();
        let (h, w) = cache.map_size;
        let dcls = Array2::from_shape_vec((n, 1), d_class_logit.to_vec()).expect("sized");
        let dvf = Array2::from_shape_fn((n, 3), |(i, j)| d_vf_logit[i][j]);

        let dpooled_concat = self.classifier.fc.backward(&cache.pooled_concat, &dcls);
        let dconcat = global_avg_pool_backward(&dpooled_concat, h, w);
        let (mut dt, mut dr) = split_channels(&dconcat, cache.trunk_channels);

        let dpooled_reg = self.regression.heads.backward(&cache.pooled_reg, &dvf);
        dr += &global_avg_pool_backward(&dpooled_reg, h, w);
        let dr1 = self.regression.conv2.backward(&cache.conv2, &dr);
        dt += &self.regression.conv1.backward(&cache.conv1, &dr1);
        self.trunk.backward(&cache.trunk, &dt);
    }

    /// Inference-mode feature maps (running batch-norm statistics).
    pub fn feature_maps(&self, x: &Array4<f64>) -> Result<FeatureMaps> {
        self.check_input(x)?;
        let trunk = self.trunk.infer(x);
        let regression = self
            .regression
            .conv2
            .infer(&self.regression.conv1.infer(&trunk));
        Ok(FeatureMaps { trunk, regression })
    }

    pub fn infer(&self, x: &Array4<f64>) -> Result<BatchOutput> {
        let maps = self.feature_maps(x)?;
        Ok(head_outputs(
            &self.regression,
            &self.classifier,
            &global_avg_pool(&maps.regression),
            &global_avg_pool(&maps.concatenated()),
        ))
    }

    pub fn save(&self, path: &Path, extra: &KvConfig) -> Result<String> {
        let mut sidecar = extra.clone();
        sidecar.merge(&self.arch.to_kv());
        write_checkpoint(path, &TensorMap::from_module(self), &sidecar)
    }

    /// Loads a checkpoint written by [`MtlNetwork::save`]; returns the network,
    /// its sidecar and the blob hash.
    pub fn load(path: &Path) -> Result<(Self, KvConfig, String)> {
        let (tensors, sidecar, hash) = read_checkpoint(path)?;
        let mut net = MtlNetwork::new(MtlArchitecture::from_kv(&sidecar)?, 0);
        tensors.load_into(&mut net)?;
        Ok((net, sidecar, hash))
    }
}

/// Inference-mode forward pass of a single triplet.
pub fn forward(net: &MtlNetwork, input: &BscanTriplet) -> Result<MtlOutput> {
    let x = input.slices.clone().insert_axis(Axis(0));
    let maps = net.feature_maps(&x)?;
    let out = head_outputs(
        &net.regression,
        &net.classifier,
        &global_avg_pool(&maps.regression),
        &global_avg_pool(&maps.concatenated()),
    );
    Ok(MtlOutput {
        class_prob: out.class_prob[0],
        vf_pred: out.vf_pred[0],
        reg_feature_maps: maps.regression.index_axis(Axis(0), 0).to_owned(),
    })
}

impl Module for MtlNetwork {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        let reg = join_name(prefix, REGRESSION);
        self.trunk.visit_mut(&join_name(prefix, SHARED), f);
        self.regression.conv1.visit_mut(&join_name(&reg, "conv1"), f);
        self.regression.conv2.visit_mut(&join_name(&reg, "conv2"), f);
        self.regression.heads.visit_mut(&join_name(&reg, "heads"), f);
        self.classifier
            .fc
            .visit_mut(&join_name(&join_name(prefix, CLASSIFICATION), "fc"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        let reg = join_name(prefix, REGRESSION);
        self.trunk.visit(&join_name(prefix, SHARED), f);
        self.regression.conv1.visit(&join_name(&reg, "conv1"), f);
        self.regression.conv2.visit(&join_name(&reg, "conv2"), f);
        self.regression.heads.visit(&join_name(&reg, "heads"), f);
        self.classifier
            .fc
            .visit(&join_name(&join_name(prefix, CLASSIFICATION), "fc"), f);
    }
}

/// Per-sample supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub labels: &'a [f64],
    /// Normalised VF targets; ignored where `mask` is false.
    pub vf_target: &'a [[f64; 3]],
    pub mask: &'a [[bool; 3]],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_cls: f64,
    pub l_reg: [f64; 3],
    pub total: f64,
}

fn losses(out: &BatchOutput, sup: &Supervision<'_>, weights: &LossWeights) -> Result<StepLosses> {
    let l_cls = classification_loss(&out.class_prob, sup.labels)?;
    let l_reg = regression_loss(&out.vf_pred, sup.vf_target, sup.mask)?;
    Ok(StepLosses {
        l_cls,
        l_reg,
        total: total_loss(l_cls, l_reg, weights)?,
    })
}

/// Training-mode loss without touching gradients.
pub fn batch_loss(
    net: &mut MtlNetwork,
    x: &Array4<f64>,
    sup: &Supervision<'_>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let (out, _) = net.forward_train(x)?;
    losses(&out, sup, weights)
}

/// Zeroes gradients, then runs forward and backward for `L_total`.
pub fn loss_and_grad(
    net: &mut MtlNetwork,
    x: &Array4<f64>,
    sup: &Supervision<'_>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    net.zero_grad();
    let (out, cache) = net.forward_train(x)?;
    let l = losses(&out, sup, weights)?;
    let dcls = loss::classification_grad_logits(&out.class_prob, sup.labels);
    let dvf = loss::regression_grad_logits(&out.vf_pred, sup.vf_target, sup.mask, weights);
    net.backward(&cache, &dcls, &dvf);
    Ok(l)
}
