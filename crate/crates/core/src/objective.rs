//! Domain loss, manipulation loss and their combination for each player.
//!
//! The original slice is the real class, the protected slice the fake class.
//! The generator minimizes `g_adv − α·L_m`, i.e. it maximizes the manipulation loss.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Invalid(format!("alpha {alpha} must be finite and non-negative")));
        }
        Ok(LossWeights { alpha })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub d_loss: f64,
    pub g_adv: f64,
    pub l_m: f64,
    pub g_total: f64,
}

impl LossBreakdown {
    pub fn new(d_loss: f64, g_adv: f64, l_m: f64, w: LossWeights) -> Self {
        LossBreakdown {
            d_loss,
            g_adv,
            l_m,
            g_total: generator_total_loss(g_adv, l_m, w),
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("l_m", self.l_m),
            ("g_total", self.g_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.d_loss, self.g_adv, self.l_m, self.g_total)
    }
}

pub const LOG_HEADER: &str = "step,d_loss,g_adv,l_m,g_total";

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `d/dp [−ln clamp(p)]`, zero where the clamp is active.
fn neg_log_grad(p: f64) -> f64 {
    if p > EPS && p < 1.0 - EPS {
        -1.0 / p
    } else {
        0.0
    }
}

fn check_batch(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Invalid(format!("{what} batch is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `−[ln D(x) + ln(1 − D(x^p))]`, batch mean.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_batch(d_real, "d_real")?;
    check_batch(d_fake, "d_fake")?;
    if d_real.len() != d_fake.len() {
        return Err(Error::Shape(format!(
            "{} real scores vs {} fake scores",
            d_real.len(),
            d_fake.len()
        )));
    }
    let n = d_real.len() as f64;
    let real: f64 = d_real.iter().map(|&p| -clamp(p).ln()).sum();
    let fake: f64 = d_fake.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum();
    Ok((real + fake) / n)
}

/// Gradients of [`discriminator_loss`] w.r.t. each real and fake score.
pub fn discriminator_loss_grads(d_real: &[f64], d_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = d_real.len() as f64;
    let real = d_real.iter().map(|&p| neg_log_grad(p) / n).collect();
    // d/dp [−ln(1 − p)] = 1/(1 − p) = −neg_log_grad(1 − p)
    let fake = d_fake.iter().map(|&p| -neg_log_grad(1.0 - p) / n).collect();
    (real, fake)
}

/// Non-saturating generator term `−ln D(x^p)`, batch mean.
pub fn generator_adversarial_loss(d_fake: &[f64]) -> Result<f64> {
    check_batch(d_fake, "d_fake")?;
    Ok(d_fake.iter().map(|&p| -clamp(p).ln()).sum::<f64>() / d_fake.len() as f64)
}

pub fn generator_adversarial_grads(d_fake: &[f64]) -> Vec<f64> {
    let n = d_fake.len() as f64;
    d_fake.iter().map(|&p| neg_log_grad(p) / n).collect()
}

/// Mean over all pixels of `(x̂^p − x^p)²`.
pub fn manipulation_loss(x_p: ArrayView2<f64>, x_hat_p: ArrayView2<f64>) -> Result<f64> {
    if x_p.dim() != x_hat_p.dim() {
        return Err(Error::Shape(format!(
            "protected {:?} vs tampered {:?}",
            x_p.dim(),
            x_hat_p.dim()
        )));
    }
    let n = x_p.len() as f64;
    Ok(x_p
        .iter()
        .zip(x_hat_p.iter())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / n)
}

/// Batched form of [`manipulation_loss`]: mean over every pixel of every sample.
pub fn manipulation_loss_batch(x_p: &Tensor, x_hat_p: &Tensor) -> Result<f64> {
    if x_p.shape() != x_hat_p.shape() {
        return Err(Error::Shape(format!(
            "protected {:?} vs tampered {:?}",
            x_p.shape(),
            x_hat_p.shape()
        )));
    }
    let n = x_p.len() as f64;
    Ok(x_p
        .data()
        .iter()
        .zip(x_hat_p.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / n)
}

/// `g_adv − α·L_m`.
pub fn generator_total_loss(g_adv: f64, l_m: f64, w: LossWeights) -> f64 {
    g_adv - w.alpha * l_m
}
