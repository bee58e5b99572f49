//! Sparse-refined straight-through estimator (SR-STE) for retraining pruned weights.
//!
//! The forward pass sees `Ŵ = W ⊙ mask`; the gradient taken with respect to `Ŵ` is
//! applied to every entry of the dense `W`, and pruned entries additionally decay with
//! weight `λ_w`:
//!
//! `W ← W − γ (∇_Ŵ L + λ_w (1 − mask) ⊙ W)`

use alloc::format;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default relative weight of the sparse-refined decay term.
pub const DEFAULT_LAMBDA_W: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SrsteConfig {
    pub lambda_w: f64,
    pub enabled: bool,
    /// Recompute masks from the dense weights at the start of every retrain epoch.
    /// Off by default: masks stay frozen from hard-prune time.
    pub refresh_masks_per_epoch: bool,
}

impl Default for SrsteConfig {
    fn default() -> Self {
        Self { lambda_w: DEFAULT_LAMBDA_W, enabled: true, refresh_masks_per_epoch: false }
    }
}

impl SrsteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w >= 0.0) || !self.lambda_w.is_finite() {
            return Err(Error::Config(format!("lambda_w must be finite and >= 0, got {}", self.lambda_w)));
        }
        Ok(())
    }

    /// Decay weight actually applied (zero when disabled).
    pub fn effective_lambda(&self) -> f64 {
        if self.enabled {
            self.lambda_w
        } else {
            0.0
        }
    }
}

/// A 0/1 mask of retained weights.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeepMask(Matrix);

impl KeepMask {
    pub fn new(mask: Matrix) -> Result<Self> {
        if let Some(bad) = mask.as_slice().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Input(format!("keep mask entries must be 0 or 1, found {bad}")));
        }
        Ok(Self(mask))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self(Matrix::ones(rows, cols))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `Ē = 1 − mask`, the indicator of pruned entries.
    pub fn complement(&self) -> Matrix {
        self.0.map(|v| 1.0 - v)
    }

    pub fn kept(&self) -> usize {
        self.0.count_nonzero()
    }
}

/// `Ŵ = w ⊙ mask`.
pub fn prune_forward(w: &Matrix, km: &KeepMask) -> Result<Matrix> {
    w.hadamard(km.matrix())
}

/// The SR-STE gradient `∇_Ŵ L + λ_w (1 − mask) ⊙ w`, to be fed into an optimizer.
pub fn srste_gradient(w: &Matrix, grad_pruned: &Matrix, km: &KeepMask, cfg: &SrsteConfig) -> Result<Matrix> {
    w.same_shape(grad_pruned, "srste_gradient")?;
    w.same_shape(km.matrix(), "srste_gradient")?;
    let lambda = cfg.effective_lambda();
    let mut g = grad_pruned.clone();
    if lambda != 0.0 {
        for ((gv, wv), mv) in g.as_mut_slice().iter_mut().zip(w.as_slice()).zip(km.matrix().as_slice()) {
            if *mv == 0.0 {
                *gv += lambda * wv;
            }
        }
    }
    Ok(g)
}

/// One plain SR-STE descent step with learning rate `gamma`.
pub fn srste_step(w: &Matrix, grad_pruned: &Matrix, km: &KeepMask, gamma: f64, cfg: &SrsteConfig) -> Result<Matrix> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {gamma}")));
    }
    let g = srste_gradient(w, grad_pruned, km, cfg)?;
    let mut out = w.clone();
    out.axpy(-gamma, &g)?;
    Ok(out)
}
