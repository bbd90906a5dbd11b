//! Fast gradient sign method.
//!
//! The adversary perturbs each pixel one step along the sign of the input
//! gradient of the model's own training objective, then clips back to the
//! valid pixel range:
//!
//! ```text
//! x̃ = clip(x + η · sign(∇ₓ L(x, y)), 0, 1)
//! ```
//!
//! Conventions that matter for reproducibility:
//!
//! * The gradient is taken through an **evaluation** forward pass: batch
//!   norm uses running statistics and the latent is its mean — but the loss
//!   is the model's full training objective, including the β-weighted rate
//!   term for the VIB variants.
//! * Parameters are bound frozen, so the tape only tracks the input.
//! * `sign(0) = 0`: a pixel with zero gradient is left untouched.
//! * `η = 0` short-circuits to an exact copy of the batch, so the clean
//!   point of every robustness curve is bit-identical to ordinary
//!   evaluation.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{Mode, ModelBundle};
use crate::multitask::{build_loss, LossSpec};
use crate::tensor::{Element, Tensor};

/// The η grid the robustness tables sweep.
pub const STANDARD_ETAS: [f64; 7] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

/// FGSM configuration: step size and the pixel clipping interval.
#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub eta: f64,
    pub clip: (f64, f64),
}

impl AttackConfig {
    /// Step `eta` with the standard [0, 1] pixel box.
    pub fn new(eta: f64) -> Self {
        AttackConfig { eta, clip: (0.0, 1.0) }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Contract(format!(
                "attack step must be finite and ≥ 0, got {}",
                self.eta
            )));
        }
        if !(self.clip.0 < self.clip.1) {
            return Err(Error::Contract(format!(
                "clip interval ({}, {}) is empty",
                self.clip.0, self.clip.1
            )));
        }
        Ok(())
    }
}

/// Perturb `batch` against `model` under its own objective `loss`.
///
/// `labels` holds one label vector per task, aligned with the model's heads.
/// Returns the perturbed batch; the model's parameters and gradients are
/// untouched.
pub fn fgsm_perturb<E: Element>(
    model: &mut ModelBundle<E>,
    batch: &Tensor<E>,
    labels: &[Vec<usize>],
    loss: &LossSpec,
    cfg: &AttackConfig,
) -> Result<Tensor<E>> {
    cfg.validate()?;

    if cfg.eta == 0.0 {
        // Bit-exact identity: no forward pass, no clipping round trip.
        return Tensor::from_vec(batch.shape(), batch.data().to_vec());
    }

    let tracked = batch.clone().with_requires_grad();
    let mut g = Graph::new();
    let fwd = model.forward_multitask(&mut g, &tracked, Mode::eval().frozen(), None)?;
    let (objective, _) = build_loss(&mut g, loss, &fwd.logits, labels, fwd.latent.as_ref(), fwd.s)?;
    let grads = g.backward(objective)?;
    let gx = grads
        .wrt(fwd.input)
        .ok_or_else(|| Error::Contract("attack: input gradient missing from tape".into()))?;

    let eta = E::from_f64(cfg.eta);
    let lo = E::from_f64(cfg.clip.0);
    let hi = E::from_f64(cfg.clip.1);
    let data: Vec<E> = batch
        .data()
        .iter()
        .zip(gx)
        .map(|(&x, &gv)| {
            let stepped = x + eta * gv.sign();
            if stepped < lo {
                lo
            } else if stepped > hi {
                hi
            } else {
                stepped
            }
        })
        .collect();
    let out = Tensor::from_vec(batch.shape(), data)?;
    if !crate::tensor::all_finite(out.data()) {
        return Err(Error::Contract("attack produced non-finite pixels".into()));
    }
    Ok(out)
}
