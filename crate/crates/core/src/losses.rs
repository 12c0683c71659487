//! Least-squares adversarial, domain-classification and L1 reconstruction
//! losses, their weighted totals, and tape versions for training.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_parts, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross reconstruction.
    pub lambda1: f64,
    /// Self reconstruction.
    pub lambda2: f64,
    /// Domain classification.
    pub lambda3: f64,
    /// Adversarial.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            lambda1: self.lambda1 * c,
            lambda2: self.lambda2 * c,
            lambda3: self.lambda3 * c,
            lambda4: self.lambda4 * c,
        }
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cls_g: f64,
    pub cls_d: f64,
    pub cross: f64,
    #[serde(rename = "self")]
    pub self_recon: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cls_g: f64,
    pub cls_d: f64,
    pub cross: f64,
    #[serde(rename = "self")]
    pub self_recon: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBundle {
    pub fn from_components(c: LossComponents, w: &LossWeights) -> Self {
        LossBundle {
            adv_g: c.adv_g,
            adv_d: c.adv_d,
            cls_g: c.cls_g,
            cls_d: c.cls_d,
            cross: c.cross,
            self_recon: c.self_recon,
            total_g: total_g(&c, w),
            total_d: total_d(&c, w),
        }
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            adv_g: self.adv_g,
            adv_d: self.adv_d,
            cls_g: self.cls_g,
            cls_d: self.cls_d,
            cross: self.cross,
            self_recon: self.self_recon,
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_g,
            self.adv_d,
            self.cls_g,
            self.cls_d,
            self.cross,
            self.self_recon,
            self.total_g,
            self.total_d,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn components_nonnegative(&self) -> bool {
        self.values()[..6].iter().all(|&v| v >= 0.0)
    }

    /// Field-wise sum, used to accumulate pair losses within an iteration.
    pub fn add(&self, o: &LossBundle) -> LossBundle {
        LossBundle {
            adv_g: self.adv_g + o.adv_g,
            adv_d: self.adv_d + o.adv_d,
            cls_g: self.cls_g + o.cls_g,
            cls_d: self.cls_d + o.cls_d,
            cross: self.cross + o.cross,
            self_recon: self.self_recon + o.self_recon,
            total_g: self.total_g + o.total_g,
            total_d: self.total_d + o.total_d,
        }
    }
}

pub fn total_g(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.cross + w.lambda2 * c.self_recon + w.lambda3 * c.cls_g + w.lambda4 * c.adv_g
}

pub fn total_d(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda3 * c.cls_d + w.lambda4 * c.adv_d
}

fn mean_sq_from<T: Scalar>(x: &Tensor<T>, target: f64) -> f64 {
    let n = x.len().max(1) as f64;
    x.data()
        .iter()
        .map(|v| (v.as_f64() - target).powi(2))
        .sum::<f64>()
        / n
}

/// `mean((d_real - 1)^2) + mean(d_fake^2)`.
pub fn lsgan_d_loss<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> f64 {
    mean_sq_from(d_real, 1.0) + mean_sq_from(d_fake, 0.0)
}

/// `mean((d_fake - 1)^2)`.
pub fn lsgan_g_loss<T: Scalar>(d_fake: &Tensor<T>) -> f64 {
    mean_sq_from(d_fake, 1.0)
}

fn neg_log_softmax<T: Scalar>(logits: &[T], index: usize) -> Result<f64> {
    if index >= logits.len() {
        return Err(Error::UnknownDomain {
            id: index,
            count: logits.len(),
        });
    }
    let as64: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let (lse, _) = log_softmax_parts(&as64);
    Ok(lse - as64[index])
}

/// Classification loss of a real patch of `true_domain`.
pub fn cls_d_loss<T: Scalar>(logits: &[T], true_domain: usize) -> Result<f64> {
    neg_log_softmax(logits, true_domain)
}

/// Classification loss of a generated patch aimed at `target_domain`.
pub fn cls_g_loss<T: Scalar>(logits_of_fake: &[T], target_domain: usize) -> Result<f64> {
    neg_log_softmax(logits_of_fake, target_domain)
}

/// Mean absolute difference.
pub fn recon_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "recon_l1 of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / n)
}

/// Tape versions of the losses above.
pub mod tape {
    use super::*;

    pub fn lsgan_d<T: Scalar>(g: &mut Graph<'_, T>, d_real: Var, d_fake: Var) -> Var {
        let r = g.mse_const(d_real, 1.0);
        let f = g.mse_const(d_fake, 0.0);
        g.add(r, f)
    }

    pub fn lsgan_g<T: Scalar>(g: &mut Graph<'_, T>, d_fake: Var) -> Var {
        g.mse_const(d_fake, 1.0)
    }

    pub fn cls<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, domain: usize) -> Var {
        g.cross_entropy(logits, domain)
    }

    pub fn recon_l1<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
        g.l1(a, b)
    }

    /// `sum_k weight_k * term_k`; zero weights still keep the term on the
    /// tape so the graph shape does not depend on the configuration.
    pub fn weighted<T: Scalar>(g: &mut Graph<'_, T>, terms: &[(f64, Var)]) -> Var {
        let scaled: Vec<Var> = terms.iter().map(|&(w, v)| g.scale(v, w)).collect();
        g.sum(&scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Group, ParamSet};
    use proptest::prelude::{prop_assert, proptest};

    fn map(v: f64) -> Tensor<f64> {
        Tensor::full(&[1, 3, 3], v)
    }

    #[test]
    fn lsgan_examples() {
        assert_eq!(lsgan_d_loss(&map(1.0), &map(0.0)), 0.0);
        assert_eq!(lsgan_d_loss(&map(0.0), &map(1.0)), 2.0);
        assert_eq!(lsgan_d_loss(&map(0.5), &map(0.5)), 0.5);
        assert_eq!(lsgan_g_loss(&map(1.0)), 0.0);
        assert_eq!(lsgan_g_loss(&map(0.0)), 1.0);
        assert_eq!(lsgan_g_loss(&map(-1.0)), 4.0);
    }

    #[test]
    fn classification_examples() {
        assert!((cls_d_loss(&[0.0f64; 4], 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cls_d_loss(&[0.0f64; 2], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((cls_g_loss(&[0.0f64; 5], 4).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(cls_d_loss(&[0.0f64, 800.0], 1).unwrap().abs() < 1e-12);
        assert!(cls_g_loss(&[0.0f64; 3], 3).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..10 {
            let l = cls_g_loss(&[s as f64, 0.0, 0.0], 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn reconstruction_examples() {
        let a = map(0.0);
        let b = map(1.0);
        assert_eq!(recon_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(recon_l1(&a, &b).unwrap(), 1.0);
        assert!(recon_l1(&a, &Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        assert_eq!(total_g(&LossComponents::default(), &w), 0.0);
        let ones = LossComponents {
            adv_g: 1.0,
            adv_d: 1.0,
            cls_g: 1.0,
            cls_d: 1.0,
            cross: 1.0,
            self_recon: 1.0,
        };
        assert_eq!(total_g(&ones, &w), 22.0);
        assert_eq!(total_d(&ones, &w), 2.0);
        let b = LossBundle::from_components(ones, &w.scaled(3.0));
        assert_eq!((b.total_g, b.total_d), (66.0, 6.0));
        assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn bundle_serializes_the_eight_fields() {
        let v = serde_json::to_value(LossBundle::default()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["adv_d", "adv_g", "cls_d", "cls_g", "cross", "self", "total_d", "total_g"]
        );
    }

    #[test]
    fn tape_losses_agree_with_pure_functions() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let real = Tensor::from_vec(&[1, 2, 2], vec![0.3, 1.2, -0.4, 0.9]).unwrap();
        let fake = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.7, 0.2, -0.5]).unwrap();
        let (r, f) = (g.input(real.clone()), g.input(fake.clone()));
        let d = tape::lsgan_d(&mut g, r, f);
        assert!((g.value(d).item() - lsgan_d_loss(&real, &fake)).abs() < 1e-12);
        let gl = tape::lsgan_g(&mut g, f);
        assert!((g.value(gl).item() - lsgan_g_loss(&fake)).abs() < 1e-12);
        let l1 = tape::recon_l1(&mut g, r, f);
        assert!((g.value(l1).item() - recon_l1(&real, &fake).unwrap()).abs() < 1e-12);
        let logits = g.input(Tensor::from_vec(&[3], vec![0.2, -1.0, 2.0]).unwrap());
        let ce = tape::cls(&mut g, logits, 1);
        assert!((g.value(ce).item() - cls_d_loss(&[0.2, -1.0, 2.0], 1).unwrap()).abs() < 1e-12);
        let tot = tape::weighted(&mut g, &[(10.0, l1), (2.0, ce)]);
        let want = 10.0 * g.value(l1).item() + 2.0 * g.value(ce).item();
        assert!((g.value(tot).item() - want).abs() < 1e-12);
        let _ = g.backward(tot, Group::GENERATOR);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(vals in proptest::collection::vec(-4.0f64..4.0, 12), t in 0usize..3) {
            let a = Tensor::from_vec(&[1, 2, 3], vals[..6].to_vec()).unwrap();
            let b = Tensor::from_vec(&[1, 2, 3], vals[6..].to_vec()).unwrap();
            prop_assert!(lsgan_d_loss(&a, &b) >= 0.0);
            prop_assert!(lsgan_g_loss(&b) >= 0.0);
            prop_assert!(recon_l1(&a, &b).unwrap() >= 0.0);
            prop_assert!((recon_l1(&a, &b).unwrap() - recon_l1(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(cls_d_loss(&vals[..3], t).unwrap() >= 0.0);
        }
    }
}
