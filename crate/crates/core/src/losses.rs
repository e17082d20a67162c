//! Loss functions with analytic gradients, plus the adversarial-weight warm-up.
//!
//! Every loss returns its value together with the gradient with respect to the
//! prediction it scores, in `f64`. The training graph wraps these as opaque scalar
//! nodes.

use serde::{Deserialize, Serialize};

/// Smoothing term in the dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the SDM regression term in the supervised loss.
    pub alpha: f64,
    /// Final value of the adversarial weight.
    pub beta_max: f64,
    /// Iteration at which the adversarial weight reaches `beta_max`.
    pub t_max: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta_max: 0.001,
            t_max: 6000,
        }
    }
}

/// A scalar loss and its gradient with respect to the scored input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

/// `1 - (2 sum(m y) + eps) / (sum(m) + sum(y) + eps)`.
pub fn dice_loss(m: &[f64], y: &[f64]) -> Result<LossValue, LossError> {
    check_pair(m, y)?;
    let inter: f64 = m.iter().zip(y).map(|(a, b)| a * b).sum();
    let total: f64 = m.iter().sum::<f64>() + y.iter().sum::<f64>();
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = total + DICE_SMOOTH;
    let grad = y.iter().map(|&yi| -(2.0 * yi * den - num) / (den * den)).collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
    })
}

/// Mean squared error between predicted and target SDMs.
pub fn mse_sdm_loss(s: &[f64], z: &[f64]) -> Result<LossValue, LossError> {
    check_pair(s, z)?;
    let n = s.len() as f64;
    let value = s.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let grad = s.iter().zip(z).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok(LossValue { value, grad })
}

/// One labeled item: probability map, label, predicted SDM, target SDM.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPrediction<'a> {
    pub prob: &'a [f64],
    pub label: &'a [f64],
    /// `None` when the network has no SDM head.
    pub sdm: Option<&'a [f64]>,
    pub target_sdm: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLoss {
    pub total: f64,
    /// Batch mean of the dice loss.
    pub dice: f64,
    /// Batch mean of the SDM regression loss (0 without an SDM head).
    pub mse: f64,
    pub grad_prob: Vec<Vec<f64>>,
    pub grad_sdm: Vec<Option<Vec<f64>>>,
}

/// `mean(dice) + alpha * mean(mse)` over the labeled items of a batch.
pub fn supervised_loss(items: &[LabeledPrediction], alpha: f64) -> Result<SupervisedLoss, LossError> {
    if items.is_empty() {
        return Err(LossError::Empty);
    }
    let n = items.len() as f64;
    let mut out = SupervisedLoss {
        total: 0.0,
        dice: 0.0,
        mse: 0.0,
        grad_prob: Vec::with_capacity(items.len()),
        grad_sdm: Vec::with_capacity(items.len()),
    };
    for item in items {
        let d = dice_loss(item.prob, item.label)?;
        out.dice += d.value / n;
        out.grad_prob.push(d.grad.into_iter().map(|g| g / n).collect());
        match item.sdm {
            Some(s) => {
                let m = mse_sdm_loss(s, item.target_sdm)?;
                out.mse += m.value / n;
                out.grad_sdm.push(Some(m.grad.into_iter().map(|g| alpha * g / n).collect()));
            }
            None => out.grad_sdm.push(None),
        }
    }
    out.total = out.dice + alpha * out.mse;
    Ok(out)
}

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_labeled: Vec<f64>,
    pub grad_unlabeled: Vec<f64>,
}

/// Binary cross-entropy with labeled pairs as the positive class:
/// `-(mean log d_l + mean log(1 - d_u))`.
pub fn discriminator_loss(d_labeled: &[f64], d_unlabeled: &[f64]) -> Result<DiscriminatorLoss, LossError> {
    if d_labeled.is_empty() || d_unlabeled.is_empty() {
        return Err(LossError::Empty);
    }
    let (nl, nu) = (d_labeled.len() as f64, d_unlabeled.len() as f64);
    let mut value = 0.0;
    let grad_labeled = d_labeled
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            value -= c.ln() / nl;
            if inside {
                -1.0 / (c * nl)
            } else {
                0.0
            }
        })
        .collect();
    let grad_unlabeled = d_unlabeled
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            value -= (1.0 - c).ln() / nu;
            if inside {
                1.0 / ((1.0 - c) * nu)
            } else {
                0.0
            }
        })
        .collect();
    Ok(DiscriminatorLoss {
        value,
        grad_labeled,
        grad_unlabeled,
    })
}

/// Non-saturating generator objective on unlabeled predictions: `-mean log d_u`.
pub fn generator_loss(d_unlabeled: &[f64]) -> Result<LossValue, LossError> {
    if d_unlabeled.is_empty() {
        return Err(LossError::Empty);
    }
    let n = d_unlabeled.len() as f64;
    let mut value = 0.0;
    let grad = d_unlabeled
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            value -= c.ln() / n;
            if inside {
                -1.0 / (c * n)
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Gaussian warm-up `beta_max * exp(-5 (1 - t / t_max)^2)`, held at `beta_max` past `t_max`.
pub fn beta_schedule(t: u64, t_max: u64, beta_max: f64) -> f64 {
    if t_max == 0 || t >= t_max {
        return beta_max;
    }
    let phase = 1.0 - t as f64 / t_max as f64;
    beta_max * (-5.0 * phase * phase).exp()
}
