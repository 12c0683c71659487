//! Finite-difference helpers for verifying reverse-mode gradients.
//!
//! These only ever evaluate the forward pass, so they stay independent of
//! the backward code they are used to check.

use crate::autograd::{ParamId, ParamSet};

/// Central difference `(f(w + h) - f(w - h)) / 2h` for one scalar weight.
/// The weight is restored before returning.
pub fn central_difference(
    params: &mut ParamSet<f64>,
    id: ParamId,
    index: usize,
    step: f64,
    loss: impl Fn(&ParamSet<f64>) -> f64,
) -> f64 {
    let orig = params.get(id).data()[index];
    params.get_mut(id).data_mut()[index] = orig + step;
    let up = loss(params);
    params.get_mut(id).data_mut()[index] = orig - step;
    let down = loss(params);
    params.get_mut(id).data_mut()[index] = orig;
    (up - down) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// inflating the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Redraws every weight at unit gain (`std = sqrt(2 / fan_in)`, biases
/// `N(0, 0.1)`).
///
/// At the small initialization used for training, deep activations of a
/// miniature network sit within a finite-difference step of the ReLU kinks,
/// which makes numeric derivatives meaningless there. Gradient correctness
/// does not depend on the weight values, so checks run on rescaled copies.
pub fn spread_weights<R: rand::Rng + ?Sized>(params: &mut ParamSet<f64>, rng: &mut R) {
    use rand_distr::{Distribution, Normal};
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let t = params.get_mut(id);
        let shape = t.shape().to_vec();
        let std = if shape.len() >= 2 {
            (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
        } else {
            0.1
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = normal.sample(rng));
    }
}
