use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use ndarray::parallel::prelude::*;

use super::param::{visit_param, visit_param_mut, Module, Param, ParamMut, ParamRef};

/// 2-D convolution over NCHW batches, computed per sample with im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Param<Ix4>,
    pub bias: Option<Param<Ix1>>,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    input_dim: (usize, usize, usize, usize),
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// He-normal initialised convolution.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array4::from_shape_simple_fn(
            (out_channels, in_channels, kernel, kernel),
            || normal.sample(rng),
        );
        Conv2d {
            weight: Param::new(weight),
            bias: with_bias.then(|| Param::new(Array1::zeros(out_channels))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (height + 2 * self.padding - k) / self.stride + 1,
            (width + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Array4<f64>) -> Geometry {
        let (_, c, h, w) = x.dim();
        assert_eq!(
            c,
            self.in_channels(),
            "conv expects {} input channels, got {c}",
            self.in_channels()
        );
        let (out_h, out_w) = self.output_size(h, w);
        Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        }
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (o, i, k, _) = self.weight.value.dim();
        self.weight
            .value
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("standard layout")
            .to_owned()
    }

    fn apply(&self, wmat: &Array2<f64>, cols: &Array2<f64>) -> Array2<f64> {
        let mut out = wmat.dot(cols);
        if let Some(b) = &self.bias {
            out += &b.value.view().insert_axis(Axis(1));
        }
        out
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let g = self.geometry(x);
        let wmat = self.weight_matrix();
        let per_sample: Vec<(Array2<f64>, Array2<f64>)> = x
            .outer_iter()
            .into_par_iter()
            .map(|xn| {
                let cols = im2col(xn, &g);
                let out = self.apply(&wmat, &cols);
                (cols, out)
            })
            .collect();
        let mut y = Array4::zeros((x.dim().0, self.out_channels(), g.out_h, g.out_w));
        let mut cols = Vec::with_capacity(per_sample.len());
        for (n, (c, out)) in per_sample.into_iter().enumerate() {
            y.slice_mut(s![n, .., .., ..]).assign(
                &out.into_shape_with_order((self.out_channels(), g.out_h, g.out_w))
                    .expect("contiguous"),
            );
            cols.push(c);
        }
        (
            y,
            ConvCache {
                cols,
                input_dim: x.dim(),
            },
        )
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let g = self.geometry(x);
        let wmat = self.weight_matrix();
        let outs: Vec<Array2<f64>> = x
            .outer_iter()
            .into_par_iter()
            .map(|xn| self.apply(&wmat, &im2col(xn, &g)))
            .collect();
        let mut y = Array4::zeros((x.dim().0, self.out_channels(), g.out_h, g.out_w));
        for (n, out) in outs.into_iter().enumerate() {
            y.slice_mut(s![n, .., .., ..]).assign(
                &out.into_shape_with_order((self.out_channels(), g.out_h, g.out_w))
                    .expect("contiguous"),
            );
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.input_dim;
        let (_, o, oh, ow) = dy.dim();
        let k = self.kernel();
        let g = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride: self.stride,
            padding: self.padding,
            out_h: oh,
            out_w: ow,
        };
        let wmat = self.weight_matrix();
        let per_sample: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dyn_ = dy
                    .slice(s![i, .., .., ..])
                    .to_owned()
                    .into_shape_with_order((o, oh * ow))
                    .expect("contiguous");
                let dw = dyn_.dot(&cache.cols[i].t());
                let db = dyn_.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&dyn_);
                (dw, db, col2im(&dcols, &g))
            })
            .collect();

        let mut dx = Array4::zeros((n, c, h, w));
        let mut dw_total = Array2::<f64>::zeros((o, c * k * k));
        let mut db_total = Array1::<f64>::zeros(o);
        for (i, (dw, db, dxn)) in per_sample.into_iter().enumerate() {
            dw_total += &dw;
            db_total += &db;
            dx.slice_mut(s![i, .., .., ..]).assign(&dxn);
        }
        self.weight.grad += &dw_total
            .into_shape_with_order((o, c, k, k))
            .expect("contiguous");
        if let Some(b) = &mut self.bias {
            b.grad += &db_total;
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        visit_param_mut(&mut self.weight, prefix, "weight", true, f);
        if let Some(b) = &mut self.bias {
            visit_param_mut(b, prefix, "bias", true, f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        visit_param(&self.weight, prefix, "weight", true, f);
        if let Some(b) = &self.bias {
            visit_param(b, prefix, "bias", true, f);
        }
    }
}

fn im2col(x: ArrayView3<f64>, g: &Geometry) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let k = g.kernel;
    let ncol = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * k * k * ncol];
    for c in 0..g.channels {
        let plane = &xs[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.channels * k * k, ncol), cols).expect("sized")
}

fn col2im(dcols: &Array2<f64>, g: &Geometry) -> Array3<f64> {
    let dcols = dcols.as_standard_layout();
    let ds = dcols.as_slice().expect("standard layout");
    let k = g.kernel;
    let ncol = g.out_h * g.out_w;
    let mut dx = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &ds[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((g.channels, g.height, g.width), dx).expect("sized")
}
