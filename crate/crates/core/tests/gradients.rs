use ndarray::Array4;
use octscreen::mtl_model::{
    batch_loss, classification_loss, loss_and_grad, regression_loss, total_loss, LossWeights,
    MtlArchitecture, MtlNetwork, Supervision,
};
use octscreen::nn::Module;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_arch() -> MtlArchitecture {
    MtlArchitecture {
        stem_width: 4,
        block_widths: vec![6, 20],
        reg_width: 12,
    }
}

struct Batch {
    x: Array4<f64>,
    labels: Vec<f64>,
    vf: Vec<[f64; 3]>,
    mask: Vec<[bool; 3]>,
}

impl Batch {
    fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            x: Array4::from_shape_fn((n, 3, 16, 12), |_| rng.random::<f64>()),
            labels: (0..n).map(|i| (i % 2) as f64).collect(),
            vf: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
            mask: (0..n).map(|i| [i != 1, true, i % 3 != 0]).collect(),
        }
    }

    fn sup(&self) -> Supervision<'_> {
        Supervision {
            labels: &self.labels,
            vf_target: &self.vf,
            mask: &self.mask,
        }
    }
}

/// (name, flat index) of every trainable scalar under `prefix`.
fn scalars(net: &MtlNetwork, prefix: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    net.visit("", &mut |p| {
        if p.trainable && p.name.starts_with(prefix) {
            out.extend((0..p.value.len()).map(|i| (p.name.clone(), i)));
        }
    });
    out
}

fn get(net: &mut MtlNetwork, name: &str, idx: usize) -> (f64, f64) {
    let mut v = None;
    net.visit_mut("", &mut |p| {
        if p.name == name {
            v = Some((p.value[idx], p.grad[idx]));
        }
    });
    v.expect("parameter exists")
}

fn set(net: &mut MtlNetwork, name: &str, idx: usize, value: f64) {
    net.visit_mut("", &mut |p| {
        if p.name == name {
            p.value[idx] = value;
        }
    });
}

fn check_group(prefix: &str, seed: u64) {
    let batch = Batch::random(4, seed);
    let w = LossWeights::new([0.7, 1.3, 0.9]).unwrap();
    let mut net = MtlNetwork::new(tiny_arch(), seed);
    loss_and_grad(&mut net, &batch.x, &batch.sup(), &w).unwrap();
    let all = scalars(&net, prefix);
    assert!(all.len() >= 32, "{prefix} has only {} scalars", all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in sample(&mut rng, all.len(), 32) {
        let (name, idx) = &all[i];
        let (v0, analytic) = get(&mut net, name, *idx);
        set(&mut net, name, *idx, v0 + h);
        let up = batch_loss(&mut net, &batch.x, &batch.sup(), &w).unwrap().total;
        set(&mut net, name, *idx, v0 - h);
        let down = batch_loss(&mut net, &batch.x, &batch.sup(), &w).unwrap().total;
        set(&mut net, name, *idx, v0);
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
        assert!(
            err < 1e-4,
            "{name}[{idx}]: analytic {analytic:e} vs numeric {numeric:e} (rel {err:e})"
        );
    }
    eprintln!("{prefix}: worst relative error {worst:e}");
}

#[test]
fn shared_trunk_gradients_match_finite_differences() {
    check_group("shared.", 1);
}

#[test]
fn regression_branch_gradients_match_finite_differences() {
    check_group("regression.", 2);
}

#[test]
fn classifier_gradients_match_finite_differences() {
    check_group("classification.", 3);
}

#[test]
fn zero_alpha_leaves_regression_heads_without_gradient() {
    let batch = Batch::random(4, 9);
    let mut net = MtlNetwork::new(tiny_arch(), 9);
    loss_and_grad(&mut net, &batch.x, &batch.sup(), &LossWeights::zero()).unwrap();
    let mut head_grad = 0.0f64;
    let mut conv_grad = 0.0f64;
    net.visit_mut("", &mut |p| {
        let s: f64 = p.grad.iter().map(|g| g.abs()).sum();
        if p.name.starts_with("regression.heads.") {
            head_grad += s;
        } else if p.name.starts_with("regression.conv") && p.trainable {
            conv_grad += s;
        }
    });
    assert_eq!(head_grad, 0.0);
    // the concatenation still routes classifier gradient into the branch convs
    assert!(conv_grad > 0.0);
}

#[test]
fn fully_masked_batch_reduces_to_classification_loss() {
    let mut batch = Batch::random(5, 4);
    batch.mask = vec![[false; 3]; 5];
    let mut net = MtlNetwork::new(tiny_arch(), 4);
    let l = batch_loss(&mut net, &batch.x, &batch.sup(), &LossWeights::default()).unwrap();
    assert_eq!(l.l_reg, [0.0; 3]);
    assert_eq!(l.total, l.l_cls);
}

#[test]
fn losses_match_summation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let pred: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let target: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mask: Vec<[bool; 3]> = (0..n)
            .map(|_| [rng.random_bool(0.7), rng.random_bool(0.7), rng.random_bool(0.7)])
            .collect();
        let got = regression_loss(&pred, &target, &mask).unwrap();
        for j in 0..3 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in 0..n {
                if mask[i][j] {
                    let d = target[i][j] - pred[i][j];
                    sum += d * d;
                    count += 1.0;
                }
            }
            let want = if count > 0.0 { sum / count } else { 0.0 };
            assert!((got[j] - want).abs() <= 1e-12);
        }

        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let mut bce = 0.0;
        for i in 0..n {
            bce -= if labels[i] == 1.0 { probs[i].ln() } else { (1.0 - probs[i]).ln() };
        }
        bce /= n as f64;
        let l_cls = classification_loss(&probs, &labels).unwrap();
        assert!((l_cls - bce).abs() <= 1e-12);

        let alpha = [rng.random(), rng.random(), rng.random()];
        let w = LossWeights::new(alpha).unwrap();
        let total = total_loss(l_cls, got, &w).unwrap();
        let want = l_cls + alpha[0] * got[0] + alpha[1] * got[1] + alpha[2] * got[2];
        assert!((total - want).abs() <= 1e-12);
        // slope in each alpha equals the matching regression term
        for j in 0..3 {
            let mut a2 = alpha;
            a2[j] += 0.5;
            let t2 = total_loss(l_cls, got, &LossWeights::new(a2).unwrap()).unwrap();
            assert!(((t2 - total) / 0.5 - got[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn classification_loss_edge_values() {
    let eps = 1e-7;
    assert!(classification_loss(&[1.0 - eps], &[1.0]).unwrap() <= 1.1e-7);
    for y in [0.0, 1.0] {
        assert!((classification_loss(&[0.5], &[y]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }
    assert!(classification_loss(&[0.5], &[0.5]).is_err());
    let l = total_loss(0.7, [0.1, 0.2, 0.3], &LossWeights::default()).unwrap();
    assert!((l - 1.3).abs() < 1e-15);
    assert_eq!(total_loss(0.7, [0.1, 0.2, 0.3], &LossWeights::zero()).unwrap(), 0.7);
}
