use ndarray::{Array1, Array4, Axis, Ix1};

use super::param::{visit_param, visit_param_mut, Module, Param, ParamMut, ParamRef};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub running_mean: Param<Ix1>,
    pub running_var: Param<Ix1>,
}

pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Param::new(Array1::zeros(channels)),
            running_var: Param::new(Array1::ones(channels)),
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward(&mut self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let xc = x.index_axis(Axis(1), ch);
            let mean = xc.sum() / count;
            let var = xc.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = istd;
            xhat.index_axis_mut(Axis(1), ch)
                .assign(&xc.mapv(|v| (v - mean) * istd));
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean.value[ch] =
                (1.0 - MOMENTUM) * self.running_mean.value[ch] + MOMENTUM * mean;
            self.running_var.value[ch] =
                (1.0 - MOMENTUM) * self.running_var.value[ch] + MOMENTUM * unbiased;
        }
        let y = self.affine(&xhat);
        (y, BnCache { xhat, inv_std })
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut xhat = x.clone();
        for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = self.running_mean.value[ch];
            let istd = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
            plane.mapv_inplace(|v| (v - mean) * istd);
        }
        self.affine(&xhat)
    }

    fn affine(&self, xhat: &Array4<f64>) -> Array4<f64> {
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            plane.mapv_inplace(|v| g * v + b);
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let dbeta = dyc.sum();
            let dgamma = (&dyc * &xh).sum();
            self.beta.grad[ch] += dbeta;
            self.gamma.grad[ch] += dgamma;
            let g = self.gamma.value[ch];
            // dxhat = g * dy; sums reuse dbeta/dgamma
            let sum_dxhat = g * dbeta;
            let sum_dxhat_xhat = g * dgamma;
            let scale = cache.inv_std[ch] / count;
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &dyv, &xv| {
                    *d = scale * (count * g * dyv - sum_dxhat - xv * sum_dxhat_xhat);
                });
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        visit_param_mut(&mut self.gamma, prefix, "gamma", true, f);
        visit_param_mut(&mut self.beta, prefix, "beta", true, f);
        visit_param_mut(&mut self.running_mean, prefix, "running_mean", false, f);
        visit_param_mut(&mut self.running_var, prefix, "running_var", false, f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        visit_param(&self.gamma, prefix, "gamma", true, f);
        visit_param(&self.beta, prefix, "beta", true, f);
        visit_param(&self.running_mean, prefix, "running_mean", false, f);
        visit_param(&self.running_var, prefix, "running_var", false, f);
    }
}
