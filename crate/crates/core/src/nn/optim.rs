use std::collections::BTreeMap;

use super::param::Module;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity buffers keyed by parameter name.
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) {
        let (momentum, decay) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |p| {
            if !p.trainable {
                return;
            }
            let v = velocity
                .entry(p.name)
                .or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, g), v) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                let grad = g + decay * *w;
                *v = momentum * *v + grad;
                *w -= lr * *v;
            }
        });
    }
}

/// Step decay: the base rate is multiplied by `gamma` every `step` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub step: usize,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        if self.step == 0 {
            return self.base;
        }
        self.base * self.gamma.powi((epoch / self.step) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;

    #[test]
    fn schedule_decays_stepwise() {
        let s = StepSchedule {
            base: 0.1,
            step: 3,
            gamma: 0.5,
        };
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(2), 0.1);
        assert_eq!(s.rate(3), 0.05);
        assert_eq!(s.rate(7), 0.025);
    }

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(2, 1, &mut rng);
        let before = lin.weight.value.clone();
        lin.weight.grad.fill(1.0);
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.step(&mut lin, 0.5);
        assert_eq!(lin.weight.value, before - 0.5);
    }
}
