//! Parameter-free tensor operations.

use ndarray::{concatenate, s, Array2, Array4, Axis};

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Global average pool `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(i, j)| x.slice(s![i, j, .., ..]).sum() / area)
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let area = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy[[i, j]] / area)
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching N, H, W")
}

pub fn split_channels(x: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Array4::from_shape_fn((2, 3, 2, 2), |(i, j, k, l)| (i + j + k + l) as f64);
        let b = Array4::from_shape_fn((2, 1, 2, 2), |(i, _, k, l)| -((i + k + l) as f64));
        let c = concat_channels(&a, &b);
        assert_eq!(c.dim(), (2, 4, 2, 2));
        let (a2, b2) = split_channels(&c, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
