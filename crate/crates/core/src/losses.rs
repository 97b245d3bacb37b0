//! Training objectives, as plain scalar functions for reporting and tests
//! and as graph builders for training.
//!
//! Adversarial terms work on raw logits through `softplus`, using
//! `log σ(z) = −softplus(−z)` and `log(1 − σ(z)) = −softplus(z)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_value, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::terrain_data::{MASK_EFFECTIVE, RAINFALL_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_reg: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 0.001,
            lambda_reg: 0.005,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_reg", self.lambda_reg),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    /// `E[log D(x|d)] + E[log(1 − D(x̂|d))]`, maximized by D.
    pub l_adv: f64,
    /// Non-saturating generator term `−E[log D(x̂|d)]`.
    pub l_adv_g: f64,
    /// Rainfall regression on real depth maps (trains D).
    pub l_reg_r: f64,
    /// Rainfall regression on generated depth maps (trains G).
    pub l_reg_f: f64,
    pub l_rec: f64,
}

/// Output of [`adversarial_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialTerms {
    pub l_adv: f64,
    pub l_adv_g: f64,
}

fn weighted_mean(values: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    values.zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Adversarial terms from per-sub-patch logits. `weights` (one per logit,
/// shared by the real and generated maps) drop sub-patches that are
/// mostly no-data; when every weight is zero both terms are zero.
pub fn adversarial_loss(real: &[f64], fake: &[f64], weights: &[f64]) -> Result<AdversarialTerms> {
    if real.len() != fake.len() || real.len() != weights.len() {
        return Err(Error::invalid("score maps and weights differ in length"));
    }
    let log_d_real = weighted_mean(real.iter().map(|&z| -softplus_value(-z)), weights);
    let log_1m_d_fake = weighted_mean(fake.iter().map(|&z| -softplus_value(z)), weights);
    let l_adv_g = weighted_mean(fake.iter().map(|&z| softplus_value(-z)), weights);
    Ok(AdversarialTerms {
        l_adv: log_d_real + log_1m_d_fake,
        l_adv_g,
    })
}

/// Mean absolute difference between estimated and true rainfall.
pub fn rainfall_reg_loss(estimate: &[f64], target: &[f64]) -> Result<f64> {
    if estimate.len() != RAINFALL_LEN || target.len() != RAINFALL_LEN {
        return Err(Error::invalid(format!(
            "rainfall vectors must have {RAINFALL_LEN} values, got {} and {}",
            estimate.len(),
            target.len()
        )));
    }
    Ok(estimate
        .iter()
        .zip(target)
        .map(|(e, y)| (e - y).abs())
        .sum::<f64>()
        / RAINFALL_LEN as f64)
}

/// Mean absolute error over effective (`mask = 1`) pixels.
pub fn reconstruction_loss(predicted: &[f64], truth: &[f64], mask: &[f32]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.len() != mask.len() {
        return Err(Error::invalid(
            "prediction, truth and mask differ in length",
        ));
    }
    let (sum, count) = predicted
        .iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, &m)| m == MASK_EFFECTIVE)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| {
            (s + (p - t).abs(), n + 1)
        });
    if count == 0 {
        return Err(Error::invalid(
            "no effective pixels for the reconstruction loss",
        ));
    }
    Ok(sum / count as f64)
}

/// `L_D = −λ_adv·L_adv + λ_reg·L_reg^r`.
pub fn total_d_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    -w.lambda_adv * c.l_adv + w.lambda_reg * c.l_reg_r
}

/// `L_G = λ_adv·L_adv^G + λ_reg·L_reg^f + λ_rec·L_rec`.
pub fn total_g_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda_adv * c.l_adv_g + w.lambda_reg * c.l_reg_f + w.lambda_rec * c.l_rec
}

/// `1` on effective pixels, `0` on no-data.
pub fn mask_weights<T: Scalar>(mask: &[f32]) -> Vec<T> {
    mask.iter()
        .map(|&m| {
            if m == MASK_EFFECTIVE {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Graph node for `L_adv` on one set of score maps.
pub fn adversarial_d_node<T: Scalar>(
    g: &mut Graph<T>,
    real: Var,
    fake: Var,
    weights: &[T],
) -> Result<Var> {
    let a = g.softplus_mean(real, weights, -1.0)?;
    let b = g.softplus_mean(fake, weights, 1.0)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, -1.0))
}

/// Graph node for the non-saturating generator term.
pub fn adversarial_g_node<T: Scalar>(g: &mut Graph<T>, fake: Var, weights: &[T]) -> Result<Var> {
    g.softplus_mean(fake, weights, -1.0)
}

/// Graph node for the rainfall regression loss; `estimate` is `[N, 12]`
/// and `target` holds the matching `N·12` values.
pub fn rainfall_reg_node<T: Scalar>(g: &mut Graph<T>, estimate: Var, target: &[T]) -> Result<Var> {
    let ones = vec![T::one(); target.len()];
    g.weighted_l1(estimate, target, &ones)
}

/// Graph node for the masked reconstruction loss.
pub fn reconstruction_node<T: Scalar>(
    g: &mut Graph<T>,
    predicted: Var,
    truth: &[T],
    weights: &[T],
) -> Result<Var> {
    g.weighted_l1(predicted, truth, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adversarial_limits() {
        let w = [1.0; 4];
        let t = adversarial_loss(&[0.0; 4], &[0.0; 4], &w).unwrap();
        assert!((t.l_adv - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let t = adversarial_loss(&[60.0; 4], &[-60.0; 4], &w).unwrap();
        assert!(t.l_adv <= 0.0 && t.l_adv > -1e-20);
        let t = adversarial_loss(&[1e4; 4], &[-1e4; 4], &w).unwrap();
        assert!(t.l_adv.is_finite() && t.l_adv_g.is_finite());
    }

    #[test]
    fn adversarial_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let fake: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let direct = real.iter().map(|&z| sig(z).ln()).sum::<f64>() / 50.0
            + fake.iter().map(|&z| (1.0 - sig(z)).ln()).sum::<f64>() / 50.0;
        let t = adversarial_loss(&real, &fake, &[1.0; 50]).unwrap();
        assert!((t.l_adv - direct).abs() < 1e-6);
        let g = -fake.iter().map(|&z| sig(z).ln()).sum::<f64>() / 50.0;
        assert!((t.l_adv_g - g).abs() < 1e-6);
    }

    #[test]
    fn regression_and_reconstruction_examples() {
        let y: Vec<f64> = (0..12).map(|i| i as f64 / 10.0).collect();
        assert_eq!(rainfall_reg_loss(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.12).collect();
        assert!((rainfall_reg_loss(&shifted, &y).unwrap() - 0.12).abs() < 1e-12);
        assert!(rainfall_reg_loss(&y[..11], &y[..11]).is_err());

        let truth = vec![0.3; 16];
        let mask = vec![1.0f32; 16];
        assert_eq!(reconstruction_loss(&truth, &truth, &mask).unwrap(), 0.0);
        let pred: Vec<f64> = truth.iter().map(|v| v + 0.2).collect();
        assert!((reconstruction_loss(&pred, &truth, &mask).unwrap() - 0.2).abs() < 1e-12);
        assert!(reconstruction_loss(&pred, &truth, &[-1.0; 16]).is_err());
    }

    #[test]
    fn totals_are_weighted_sums() {
        let w = LossWeights::default();
        let c = LossComponents {
            l_adv: 2.0,
            l_reg_r: 0.4,
            ..Default::default()
        };
        assert!(total_d_loss(&c, &w).abs() < 1e-18);
        let c = LossComponents {
            l_rec: 0.1,
            l_adv_g: 1.0,
            l_reg_f: 0.2,
            ..Default::default()
        };
        assert!((total_g_loss(&c, &w) - 0.102).abs() < 1e-15);
        let zero = LossWeights {
            lambda_adv: 0.0,
            lambda_reg: 0.0,
            lambda_rec: 0.0,
        };
        assert_eq!(total_g_loss(&c, &zero), 0.0);
        assert!(LossWeights {
            lambda_adv: -1.0,
            ..w
        }
        .validate()
        .is_err());
    }

    #[test]
    fn graph_nodes_agree_with_scalar_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fake: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..9).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_vec(&[1, 1, 3, 3], real.clone()).unwrap());
        let f = g.constant(Tensor::from_vec(&[1, 1, 3, 3], fake.clone()).unwrap());
        let d = adversarial_d_node(&mut g, r, f, &w).unwrap();
        let gn = adversarial_g_node(&mut g, f, &w).unwrap();
        let t = adversarial_loss(&real, &fake, &w).unwrap();
        assert!((g.value(d).data()[0] - t.l_adv).abs() < 1e-12);
        assert!((g.value(gn).data()[0] - t.l_adv_g).abs() < 1e-12);
    }
}
