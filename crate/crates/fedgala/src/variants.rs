//! Ablation variants: reweighting unaligned gradients instead of discarding
//! them, and the L2 / proximal local regularizers.
//!
//! Regularizer gradients are added to the SSL batch gradient before the
//! alignment filter, so filtering acts on the gradient of the total local
//! objective.

use crate::encoders::{LayeredParams, UpdateDelta};
use crate::error::{Error, Result};

/// What happens to a layer whose gradient fails the alignment test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalMode {
    /// Skip the layer update entirely.
    Discard,
    /// Apply the update scaled by this factor in (0, 1].
    Reweight(f64),
}

/// Per-client objective knobs. Defaults are the plain protocol: discard
/// mode, no regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantConfig {
    pub local_mode: LocalMode,
    pub l2_lambda: f64,
    pub prox_mu: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig { local_mode: LocalMode::Discard, l2_lambda: 0.0, prox_mu: 0.0 }
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if let LocalMode::Reweight(f) = self.local_mode {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Precondition(format!(
                    "reweight factor must lie in (0, 1], got {f}"
                )));
            }
        }
        if !self.l2_lambda.is_finite() || self.l2_lambda < 0.0 {
            return Err(Error::Precondition("l2 lambda must be finite and >= 0".to_string()));
        }
        if !self.prox_mu.is_finite() || self.prox_mu < 0.0 {
            return Err(Error::Precondition("prox mu must be finite and >= 0".to_string()));
        }
        Ok(())
    }

    /// Add 2*lambda*theta and 2*mu*(theta - theta_global) to `grad`.
    pub fn add_regularizer_terms(
        &self,
        grad: &mut UpdateDelta,
        params: &LayeredParams,
        global: &LayeredParams,
    ) -> Result<()> {
        if self.l2_lambda > 0.0 {
            let term = l2_grad_term(params, self.l2_lambda)?;
            grad.axpy(1.0, &term);
        }
        if self.prox_mu > 0.0 {
            let term = prox_grad_term(params, global, self.prox_mu)?;
            grad.axpy(1.0, &term);
        }
        Ok(())
    }
}

/// Filtered step that reweights unaligned layers by `factor` instead of
/// dropping them. Aligned layers step with the full gradient either way.
pub fn reweight_sgd_step(
    params: &LayeredParams,
    learning_rate: f64,
    batch_grad: &UpdateDelta,
    reference: &UpdateDelta,
    tau: f64,
    factor: f64,
) -> Result<(LayeredParams, crate::local_align::DiscardStats)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Precondition(format!(
            "reweight factor must lie in (0, 1], got {factor}"
        )));
    }
    crate::local_align::step_with_mode(
        params,
        learning_rate,
        batch_grad,
        reference,
        tau,
        LocalMode::Reweight(factor),
    )
}

/// Gradient of lambda * ||theta||^2: 2*lambda*theta per layer.
pub fn l2_grad_term(params: &LayeredParams, lambda: f64) -> Result<UpdateDelta> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Precondition("l2 lambda must be finite and >= 0".to_string()));
    }
    let mut term = UpdateDelta::zeros_like(params, 0);
    for (t, p) in term.layers.iter_mut().zip(&params.layers) {
        for (tv, pv) in t.values.iter_mut().zip(&p.values) {
            *tv = 2.0 * lambda * pv;
        }
    }
    Ok(term)
}

/// Gradient of mu * ||theta - theta_global||^2: 2*mu*(theta - theta_global).
pub fn prox_grad_term(
    params: &LayeredParams,
    global: &LayeredParams,
    mu: f64,
) -> Result<UpdateDelta> {
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::Precondition("prox mu must be finite and >= 0".to_string()));
    }
    params.check_same_shape(global, "prox_grad_term")?;
    let mut term = UpdateDelta::zeros_like(params, 0);
    for ((t, p), g) in term.layers.iter_mut().zip(&params.layers).zip(&global.layers) {
        for ((tv, pv), gv) in t.values.iter_mut().zip(&p.values).zip(&g.values) {
            *tv = 2.0 * mu * (pv - gv);
        }
    }
    Ok(term)
}
