//! Adversarial and reconstruction objectives.
//!
//! Adversarial terms take discriminator logits `l` with `D = sigmoid(l)`, so
//! `-log D = softplus(-l)` and `-log(1 - D) = softplus(l)` never see `log 0`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::fused::Softplus;

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

/// `-(1/m) Σ [log D(y) + log(1 - D(G(x)))]`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Non-saturating generator term `-(1/m) Σ log D(G(x))`.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: a.dims().to_vec(),
            found: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn mae(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `coefficient · (MAE(x, x_rec) + MAE(y, y_rec))`.
pub fn cycle_consistency_loss(
    x: &Tensor,
    x_rec: &Tensor,
    y: &Tensor,
    y_rec: &Tensor,
    coefficient: f64,
) -> Result<Tensor> {
    same_shape("cycle reconstruction of x", x, x_rec)?;
    same_shape("cycle reconstruction of y", y, y_rec)?;
    Ok(((mae(x, x_rec)? + mae(y, y_rec)?)? * coefficient)?)
}

/// `coefficient · MAE(generated, target)`.
pub fn pixel_loss(generated: &Tensor, target: &Tensor, coefficient: f64) -> Result<Tensor> {
    same_shape("pixel loss target", generated, target)?;
    Ok((mae(generated, target)? * coefficient)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cycle: f64,
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cycle: 10.0,
            pixel: 100.0,
        }
    }
}

/// Scalar losses of one training step, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_aux: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        self.d_loss.is_finite() && self.g_adv.is_finite() && self.g_aux.is_finite()
    }
}
