//! ADMM machinery for pattern-constrained weights.
//!
//! For each pruned matrix `W` the constraint `W ∈ S` is split off onto an auxiliary
//! copy `Z`. One iteration alternates
//!
//! 1. a W-step: minimize `f(W) + (ρ/2)‖W − Z + U‖²_F` (gradient training),
//! 2. a Z-step: `Z ← Π_S(W + U)`, the pattern pruning of `W + U`,
//! 3. a dual step: `U ← U + W − Z`.
//!
//! `S` is a per-block cardinality set and therefore nonconvex; the Z-step is still the
//! exact per-block Euclidean projection under [`ProjectionMode::TopKOnly`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pattern::{self, PatternPool, ProjectionMode, SparsityConfig};

/// Default penalty weight ρ.
pub const DEFAULT_RHO: f64 = 0.01;

/// Relative residual below which an ADMM run counts as converged.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

/// Whether the pattern pool is rebuilt from `W + U` at every projection or frozen after
/// the first one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PoolPolicy {
    #[default]
    Rebuild,
    Frozen,
}

/// ADMM variables for one constrained weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub target_id: String,
    pub z: Matrix,
    pub u: Matrix,
    pub rho: f64,
    pub iteration: usize,
    pub cfg: SparsityConfig,
    pub pool_policy: PoolPolicy,
    /// Pool used by the latest projection (pool-constrained mode only).
    pub pool: Option<PatternPool>,
}

/// Zero-initialized state for `w`.
pub fn init_state(target_id: impl Into<String>, w: &Matrix, cfg: SparsityConfig, rho: f64) -> Result<AdmmState> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be a positive finite number, got {rho}")));
    }
    cfg.validate()?;
    pattern::partition_rect(w, cfg.block_rows, cfg.block_cols)?;
    Ok(AdmmState {
        target_id: target_id.into(),
        z: Matrix::zeros_like(w),
        u: Matrix::zeros_like(w),
        rho,
        iteration: 0,
        cfg,
        pool_policy: PoolPolicy::Rebuild,
        pool: None,
    })
}

/// Augmented-Lagrangian term `(ρ/2)‖w − Z + U‖²_F` and its gradient `ρ(w − Z + U)`.
pub fn penalty(w: &Matrix, st: &AdmmState) -> Result<(f64, Matrix)> {
    let mut diff = w.sub(&st.z)?;
    diff.add_assign(&st.u)?;
    let value = 0.5 * st.rho * diff.frobenius_sq();
    let grad = diff.scale(st.rho);
    Ok((value, grad))
}

/// Euclidean projection of `v` onto the pattern-sparse set: the pruned matrix.
pub fn project(v: &Matrix, cfg: &SparsityConfig) -> Result<Matrix> {
    Ok(pattern::pattern_prune(v, cfg)?.pruned)
}

/// `U ← U + w − Z`, advancing the iteration counter.
pub fn dual_update(st: &mut AdmmState, w: &Matrix) -> Result<()> {
    let residual = w.sub(&st.z)?;
    st.u.add_assign(&residual)?;
    st.iteration += 1;
    Ok(())
}

impl AdmmState {
    /// Z-step: `Z ← Π(W + U)` honoring the pool policy.
    pub fn project_from(&mut self, w: &Matrix) -> Result<()> {
        let v = w.add(&self.u)?;
        let out = match (self.cfg.mode, self.pool_policy, &self.pool) {
            (ProjectionMode::PoolConstrained, PoolPolicy::Frozen, Some(pool)) => {
                pattern::pattern_prune_with_pool(&v, &self.cfg, pool)?
            }
            _ => pattern::pattern_prune(&v, &self.cfg)?,
        };
        self.z = out.pruned;
        if out.pool.is_some() {
            self.pool = out.pool;
        }
        Ok(())
    }

    /// One Z-step plus dual update; returns `‖W − Z‖²_F` measured after the projection.
    pub fn step(&mut self, w: &Matrix) -> Result<f64> {
        self.project_from(w)?;
        let r = w.sub(&self.z)?.frobenius_sq();
        dual_update(self, w)?;
        Ok(r)
    }

    /// Feasibility of the current `Z` against the pool it was projected with.
    pub fn z_is_feasible(&self) -> Result<bool> {
        match &self.pool {
            Some(pool) => pattern::is_feasible_in_pool(&self.z, &self.cfg, pool),
            None => pattern::is_feasible(&self.z, &self.cfg),
        }
    }

    /// 0/1 mask of `Z`'s support.
    pub fn support_mask(&self) -> Matrix {
        self.z.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
    }
}

/// Convergence record of one ADMM iteration, aggregated over all states.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdmmRecord {
    pub iteration: usize,
    /// `sqrt(Σ_i ‖W_i − Z_i‖²_F)`.
    pub primal_residual: f64,
    /// Primal residual over `sqrt(Σ_i ‖W_i‖²_F)`.
    pub relative_residual: f64,
    /// `Σ_i (ρ_i/2)‖W_i − Z_i + U_i‖²_F` after the dual update.
    pub penalty_value: f64,
    pub task_loss: f64,
    /// Per-state `‖W_i − Z_i‖_F`, in state order.
    pub per_state_residuals: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdmmReport {
    pub records: Vec<AdmmRecord>,
}

impl AdmmReport {
    pub fn last(&self) -> Option<&AdmmRecord> {
        self.records.last()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// An ADMM run stopped by an error; carries everything recorded before it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmAbort {
    pub error: Error,
    pub report: AdmmReport,
}

/// The W-step of ADMM: owns the weights and knows how to lower `f + Σ penalty`.
pub trait WSubproblem {
    /// Minimizes the task loss plus the penalties of `states` over the weights;
    /// returns the task loss of the last evaluated batch or epoch.
    fn solve(&mut self, states: &[AdmmState]) -> Result<f64>;

    /// Current value of the weight constrained by `states[index]`.
    fn weight(&self, index: usize) -> &Matrix;
}

/// Options for [`admm_iterate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterateOptions {
    pub iterations: usize,
    /// Stop early once the relative residual drops below this value.
    pub tolerance: Option<f64>,
}

/// Runs ADMM iterations: W-step, then projection and dual update for every state.
pub fn admm_iterate<S: WSubproblem>(
    sub: &mut S,
    states: &mut [AdmmState],
    opts: IterateOptions,
) -> core::result::Result<AdmmReport, AdmmAbort> {
    let mut report = AdmmReport::default();
    for _ in 0..opts.iterations {
        let task_loss = match sub.solve(states) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => {
                return Err(AdmmAbort { error: Error::Numeric(format!("task loss became {l}")), report });
            }
            Err(error) => return Err(AdmmAbort { error, report }),
        };
        match record_iteration(sub, states, task_loss) {
            Ok(rec) => {
                let done = opts.tolerance.is_some_and(|t| rec.relative_residual < t);
                report.records.push(rec);
                if done {
                    break;
                }
            }
            Err(error) => return Err(AdmmAbort { error, report }),
        }
    }
    Ok(report)
}

fn record_iteration<S: WSubproblem>(sub: &S, states: &mut [AdmmState], task_loss: f64) -> Result<AdmmRecord> {
    let mut residual_sq = 0.0;
    let mut weight_sq = 0.0;
    let mut penalty_value = 0.0;
    let mut per_state = Vec::with_capacity(states.len());
    for (i, st) in states.iter_mut().enumerate() {
        let w = sub.weight(i);
        let r = st.step(w)?;
        residual_sq += r;
        weight_sq += w.frobenius_sq();
        penalty_value += penalty(w, st)?.0;
        per_state.push(crate::math::sqrt(r));
    }
    let primal = crate::math::sqrt(residual_sq);
    let relative = if weight_sq > 0.0 { primal / crate::math::sqrt(weight_sq) } else { 0.0 };
    Ok(AdmmRecord {
        iteration: states.first().map_or(0, |s| s.iteration),
        primal_residual: primal,
        relative_residual: relative,
        penalty_value,
        task_loss,
        per_state_residuals: per_state,
    })
}
