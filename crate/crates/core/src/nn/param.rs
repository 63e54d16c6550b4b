use ndarray::{Array, Dimension};

/// A tensor of trainable values together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    fn view_mut(&mut self, name: String, trainable: bool) -> ParamMut<'_> {
        let shape = self.value.shape().to_vec();
        ParamMut {
            name,
            shape,
            value: self
                .value
                .as_slice_mut()
                .expect("parameters are stored in standard layout"),
            grad: self
                .grad
                .as_slice_mut()
                .expect("parameters are stored in standard layout"),
            trainable,
        }
    }

    fn view(&self, name: String, trainable: bool) -> ParamRef<'_> {
        ParamRef {
            name,
            shape: self.value.shape().to_vec(),
            value: self
                .value
                .as_slice()
                .expect("parameters are stored in standard layout"),
            trainable,
        }
    }
}

/// Mutable flat view of one named parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    /// Buffers such as batch-norm running statistics are visited but not trained.
    pub trainable: bool,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a [f64],
    pub trainable: bool,
}

/// Anything that owns named parameter tensors.
pub trait Module {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>));
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |p| p.grad.fill(0.0));
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_param_mut<D: Dimension>(
    p: &mut Param<D>,
    prefix: &str,
    name: &str,
    trainable: bool,
    f: &mut dyn FnMut(ParamMut<'_>),
) {
    f(p.view_mut(join(prefix, name), trainable))
}

pub(crate) fn visit_param<D: Dimension>(
    p: &Param<D>,
    prefix: &str,
    name: &str,
    trainable: bool,
    f: &mut dyn FnMut(ParamRef<'_>),
) {
    f(p.view(join(prefix, name), trainable))
}
