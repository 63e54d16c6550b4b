//! Small residual CNN building blocks shared by the stage-1 backbone and the
//! multi-task trunk.

use ndarray::Array4;
use rand::Rng;

use super::batchnorm::{BatchNorm2d, BnCache};
use super::conv::{Conv2d, ConvCache};
use super::ops::{relu, relu_backward};
use super::param::{join, Module, ParamMut, ParamRef};

/// conv -> batch-norm -> ReLU
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct ConvBnReluCache {
    conv: ConvCache,
    bn: BnCache,
    out: Array4<f64>,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(inputs, outputs, kernel, stride, kernel / 2, false, rng),
            bn: BatchNorm2d::new(outputs),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> (Array4<f64>, ConvBnReluCache) {
        let (c, conv) = self.conv.forward(x);
        let (b, bn) = self.bn.forward(&c);
        let out = relu(&b);
        (out.clone(), ConvBnReluCache { conv, bn, out })
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        relu(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn backward(&mut self, cache: &ConvBnReluCache, dy: &Array4<f64>) -> Array4<f64> {
        let d = relu_backward(&cache.out, dy);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d)
    }
}

impl Module for ConvBnRelu {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Basic two-convolution residual block with a projection shortcut when the
/// shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub first: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

pub struct ResidualCache {
    first: ConvBnReluCache,
    conv2: ConvCache,
    bn2: BnCache,
    shortcut: Option<(ConvCache, BnCache)>,
    out: Array4<f64>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || inputs != outputs).then(|| {
            (
                Conv2d::new(inputs, outputs, 1, stride, 0, false, rng),
                BatchNorm2d::new(outputs),
            )
        });
        ResidualBlock {
            first: ConvBnRelu::new(inputs, outputs, 3, stride, rng),
            conv2: Conv2d::new(outputs, outputs, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(outputs),
            shortcut,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> (Array4<f64>, ResidualCache) {
        let (h, first) = self.first.forward(x);
        let (c2, conv2) = self.conv2.forward(&h);
        let (mut main, bn2) = self.bn2.forward(&c2);
        let shortcut = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (sc, cc) = conv.forward(x);
                let (sb, bc) = bn.forward(&sc);
                main += &sb;
                Some((cc, bc))
            }
            None => {
                main += x;
                None
            }
        };
        let out = relu(&main);
        (
            out.clone(),
            ResidualCache {
                first,
                conv2,
                bn2,
                shortcut,
                out,
            },
        )
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut main = self.bn2.infer(&self.conv2.infer(&self.first.infer(x)));
        match &self.shortcut {
            Some((conv, bn)) => main += &bn.infer(&conv.infer(x)),
            None => main += x,
        }
        relu(&main)
    }

    pub fn backward(&mut self, cache: &ResidualCache, dy: &Array4<f64>) -> Array4<f64> {
        let d = relu_backward(&cache.out, dy);
        let dm = self.bn2.backward(&cache.bn2, &d);
        let dm = self.conv2.backward(&cache.conv2, &dm);
        let mut dx = self.first.backward(&cache.first, &dm);
        match (&mut self.shortcut, &cache.shortcut) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let ds = bn.backward(bc, &d);
                dx += &conv.backward(cc, &ds);
            }
            _ => dx += &d,
        }
        dx
    }
}

impl Module for ResidualBlock {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.first.visit(&join(prefix, "first"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// One stride-2 residual block per entry.
    pub block_widths: Vec<usize>,
}

impl TrunkConfig {
    pub fn out_channels(&self) -> usize {
        self.block_widths.last().copied().unwrap_or(self.stem_width)
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.block_widths
            .iter()
            .fold((height, width), |(h, w), _| ((h - 1) / 2 + 1, (w - 1) / 2 + 1))
    }
}

/// Stem convolution followed by a ladder of downsampling residual blocks.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: TrunkConfig,
    pub stem: ConvBnRelu,
    pub blocks: Vec<ResidualBlock>,
}

pub struct TrunkCache {
    stem: ConvBnReluCache,
    blocks: Vec<ResidualCache>,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(config: TrunkConfig, rng: &mut R) -> Self {
        let stem = ConvBnRelu::new(config.in_channels, config.stem_width, 3, 1, rng);
        let mut blocks = Vec::with_capacity(config.block_widths.len());
        let mut width = config.stem_width;
        for &next in &config.block_widths {
            blocks.push(ResidualBlock::new(width, next, 2, rng));
            width = next;
        }
        Trunk {
            config,
            stem,
            blocks,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> (Array4<f64>, TrunkCache) {
        let (mut h, stem) = self.stem.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, cache) = block.forward(&h);
            blocks.push(cache);
            h = next;
        }
        (h, TrunkCache { stem, blocks })
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.blocks
            .iter()
            .fold(self.stem.infer(x), |h, block| block.infer(&h))
    }

    pub fn backward(&mut self, cache: &TrunkCache, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = dy.clone();
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(bc, &d);
        }
        self.stem.backward(&cache.stem, &d)
    }
}

impl Module for Trunk {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunk_output_shape_follows_config() {
        let cfg = TrunkConfig {
            in_channels: 3,
            stem_width: 4,
            block_widths: vec![6, 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut trunk = Trunk::new(cfg.clone(), &mut rng);
        let x = Array4::from_elem((2, 3, 13, 10), 0.3);
        let (y, _) = trunk.forward(&x);
        let (h, w) = cfg.output_size(13, 10);
        assert_eq!(y.dim(), (2, 8, h, w));
        assert_eq!((h, w), (4, 3));
        assert_eq!(trunk.infer(&x).dim(), y.dim());
    }
}
