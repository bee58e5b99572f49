//! AdamW: Adam moments with bias correction plus decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators aligned with [`ModelParams::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params.params.iter().map(|p| Matrix::zeros_like(&p.value)).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update of every parameter:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·weight_decay·p`, with biases and layer-norm parameters
/// exempt from the decay term.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.params.len() || opt.m.len() != grads.len() {
        return Err(Error::Contract(format!(
            "expected {} gradients and moments, got {} and {}",
            params.params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (p, g) in params.params.iter().zip(grads) {
        p.value.same_shape(g, "optimizer_step")?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - math::powi(BETA1, t);
    let bc2 = 1.0 - math::powi(BETA2, t);
    for (i, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
        let decay = if p.kind.decays() { weight_decay } else { 0.0 };
        let m = opt.m[i].as_mut_slice();
        let v = opt.v[i].as_mut_slice();
        for (((w, &gv), mv), vv) in p.value.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * (m_hat / (math::sqrt(v_hat) + EPSILON)) + lr * decay * *w;
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().map(Matrix::frobenius_sq).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, ParamKind};

    fn tiny() -> ModelParams {
        let cfg = EncoderConfig { n_layers: 1, d_model: 4, n_heads: 1, d_ff: 4, vocab_size: 5, max_seq_len: 4, n_classes: 2 };
        ModelParams::init(cfg, 0).unwrap()
    }

    fn zero_grads(p: &ModelParams) -> Vec<Matrix> {
        p.params.iter().map(|p| Matrix::zeros_like(&p.value)).collect()
    }

    #[test]
    fn zero_gradient_is_pure_decay_with_exemptions() {
        let mut params = tiny();
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let grads = zero_grads(&params);
        optimizer_step(&mut params, &grads, &mut opt, 0.1, 0.01).unwrap();
        for (a, b) in params.params.iter().zip(&before.params) {
            let factor = if a.kind.decays() { 1.0 - 0.1 * 0.01 } else { 1.0 };
            for (x, y) in a.value.as_slice().iter().zip(b.value.as_slice()) {
                assert!((x - y * factor).abs() < 1e-15);
            }
        }
        assert!(params.params.iter().any(|p| p.kind == ParamKind::NormGain));
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = tiny();
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let g = 0.37;
        let grads: Vec<Matrix> = params.params.iter().map(|p| Matrix::filled(p.value.rows(), p.value.cols(), g)).collect();
        let lr = 1e-3;
        optimizer_step(&mut params, &grads, &mut opt, lr, 0.0).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expected = lr * g / (g.abs() + EPSILON);
        for (a, b) in params.params.iter().zip(&before.params) {
            for (x, y) in a.value.as_slice().iter().zip(b.value.as_slice()) {
                assert!((y - x - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut params = tiny();
        let mut opt = OptimizerState::new(&params);
        let mut grads = zero_grads(&params);
        grads[0].as_mut_slice()[0] = f64::NAN;
        assert!(matches!(optimizer_step(&mut params, &grads, &mut opt, 0.1, 0.0), Err(Error::Numeric(_))));
        assert!(optimizer_step(&mut params, &grads[1..], &mut opt, 0.1, 0.0).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::filled(1, 1, 3.0), Matrix::filled(1, 1, 4.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][(0, 0)] - 0.6).abs() < 1e-15 && (g[1][(0, 0)] - 0.8).abs() < 1e-15);
    }
}
