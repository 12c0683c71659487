//! Trainable layers on top of the autograd tape, weight initialization and
//! the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Group, ParamId, ParamSet, Var};
use crate::tensor::{Scalar, Tensor};

/// Weight initialization scheme; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Normal(f64),
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`.
    He,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        group: Group,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        let fan_in = spec.c_in * k * k;
        let weight = params.add(
            format!("{name}.weight"),
            group,
            gaussian(&[spec.c_out, spec.c_in, k, k], init.std(fan_in), rng),
        );
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[spec.c_out]));
        Conv2d {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution ("deconvolution") with bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        group: Group,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        // each output pixel receives about c_in * (k / stride)^2 contributions
        let fan_in = (spec.c_in * k * k / (spec.stride * spec.stride)).max(1);
        let weight = params.add(
            format!("{name}.weight"),
            group,
            gaussian(&[spec.c_in, spec.c_out, k, k], init.std(fan_in), rng),
        );
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[spec.c_out]));
        ConvTranspose2d {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        group: Group,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            group,
            gaussian(&[n_out, n_in], init.std(n_in), rng),
        );
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[n_out]));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Adam moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam over a fixed subset of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    ids: Vec<ParamId>,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, ids: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let moments = ids
            .iter()
            .map(|&id| Moments {
                m: Tensor::zeros(params.get(id).shape()),
                v: Tensor::zeros(params.get(id).shape()),
            })
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            ids,
            moments,
        }
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn from_parts(
        ids: Vec<ParamId>,
        moments: Vec<Moments<T>>,
        step: u64,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Self {
        assert_eq!(ids.len(), moments.len(), "one moment pair per parameter");
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step,
            ids,
            moments,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut [Moments<T>] {
        &mut self.moments
    }

    /// One bias-corrected update. Parameters without a gradient are treated
    /// as having a zero gradient.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (&id, mom) in self.ids.iter().zip(&mut self.moments) {
            let grad = grads.get(id);
            let w = params.get_mut(id).data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..w.len() {
                let gi = grad.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_init_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        let conv = Conv2d::new(
            &mut p,
            "c",
            Group::GENERATOR,
            ConvSpec::new(16, 32, 4, 2, 1),
            Init::Normal(0.02),
            &mut rng,
        );
        let w = p.get(conv.weight);
        let mean = w.mean();
        let std =
            (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 2e-3);
        assert!((std - 0.02).abs() < 1e-3, "std {std}");
        assert_eq!(p.get(conv.bias).data(), &[0.0; 32]);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add(
            "x",
            Group::GENERATOR,
            Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(),
        );
        let mut opt = Adam::new(&p, vec![id], 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let mut g = Graph::new(&p);
            let x = g.param(id);
            let loss = g.mse_const(x, 1.0);
            let grads = g.backward(loss, Group::GENERATOR);
            opt.update(&mut p, &grads);
        }
        for &v in p.get(id).data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("x", Group::GENERATOR, Tensor::scalar(0.0));
        let mut opt = Adam::new(&p, vec![id], 0.01, 0.5, 0.999);
        let mut grads = Gradients::empty(1);
        let mut g1 = Gradients::empty(1);
        {
            let mut g = Graph::new(&p);
            let x = g.param(id);
            let l = g.mse_const(x, 1.0);
            g1.accumulate(&g.backward(l, Group::GENERATOR));
        }
        grads.accumulate(&g1);
        opt.update(&mut p, &grads);
        assert!((p.get(id).item() - 0.01).abs() < 1e-9);
    }
}
