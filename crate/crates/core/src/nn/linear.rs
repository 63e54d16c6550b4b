use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::{visit_param, visit_param_mut, Module, Param, ParamMut, ParamRef};

/// Fully connected layer `y = x W^T + b` over `(N, in)` batches.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Param<Ix2>,
    pub bias: Param<Ix1>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        Linear {
            weight: Param::new(Array2::from_shape_simple_fn((outputs, inputs), || {
                normal.sample(rng)
            })),
            bias: Param::new(Array1::zeros(outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value.t()) + &self.bias.value
    }

    /// `x` is the input seen by the matching forward call.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &dy.t().dot(x);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value)
    }
}

impl Module for Linear {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        visit_param_mut(&mut self.weight, prefix, "weight", true, f);
        visit_param_mut(&mut self.bias, prefix, "bias", true, f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        visit_param(&self.weight, prefix, "weight", true, f);
        visit_param(&self.bias, prefix, "bias", true, f);
    }
}
