//! The training pipeline: dense training, the ADMM phase, hard pruning, SR-STE
//! retraining and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::admm::{self, AdmmReport, AdmmState, IterateOptions, PoolPolicy, WSubproblem};
use crate::autodiff::grad_check;
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{self, AttentionPruneConfig, MaskSet, ModelParams};
use crate::optim::{self, OptimizerState};
use crate::pattern::{self, SparsityConfig};
use crate::srste::{self, KeepMask, SrsteConfig};

/// Learning rate used for from-scratch training of the small encoder.
pub const TOY_LEARNING_RATE: f64 = 3e-3;
/// Learning rate for fine-tuning a pre-trained BERT-size encoder.
pub const BERT_LEARNING_RATE: f64 = 7e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LrSchedule {
    Constant,
    /// Linear decay to 10% of the initial rate over each phase.
    #[default]
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_dense: usize,
    pub epochs_admm: usize,
    pub epochs_retrain: usize,
    pub rho: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub pool_policy: PoolPolicy,
    /// Stop the ADMM phase early once the relative residual falls below this value.
    pub admm_tolerance: Option<f64>,
    /// Finite-difference check of every penalty gradient on the first batch of each
    /// ADMM epoch.
    pub check_penalty_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Settings for training the small encoder from scratch.
    pub fn toy() -> Self {
        Self {
            learning_rate: TOY_LEARNING_RATE,
            weight_decay: 0.001,
            batch_size: 24,
            epochs_dense: 5,
            epochs_admm: 5,
            epochs_retrain: 5,
            rho: admm::DEFAULT_RHO,
            seed: 0,
            lr_schedule: LrSchedule::LinearDecay,
            grad_clip: Some(1.0),
            pool_policy: PoolPolicy::Rebuild,
            admm_tolerance: None,
            check_penalty_gradients: true,
        }
    }

    /// Settings used when fine-tuning a pre-trained BERT-base model.
    pub fn bert_scale() -> Self {
        Self { learning_rate: BERT_LEARNING_RATE, check_penalty_gradients: false, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("train.rho must be positive, got {}", self.rho)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Phase {
    Dense,
    Admm,
    Retrain,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Dense => 1,
            Phase::Admm => 2,
            Phase::Retrain => 3,
        }
    }
}

/// Training metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub loss: f64,
    pub accuracy: f64,
    /// Present for ADMM epochs.
    pub primal_residual: Option<f64>,
    pub relative_residual: Option<f64>,
    pub penalty: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub n_examples: usize,
}

fn mix_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    // splitmix64 finalizer over the combined fields
    let mut z = seed ^ phase.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pad_multiple(ap: &AttentionPruneConfig) -> usize {
    if ap.enabled {
        ap.cfg.block_rows.max(ap.cfg.block_cols)
    } else {
        1
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct BatchResult {
    loss: f64,
    correct: usize,
    grads: Vec<Matrix>,
}

fn batch_gradients(
    params: &ModelParams,
    masks: Option<&MaskSet>,
    batch: &Batch,
    ap: &AttentionPruneConfig,
) -> Result<BatchResult> {
    let mut g = model::forward_graph(params, masks, batch, ap)?;
    let logits = g.tape.value(g.logits).clone();
    let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == batch.labels[r]).count();
    let loss_var = g.tape.cross_entropy(g.logits, &batch.labels)?;
    let loss = g.tape.value(loss_var)[(0, 0)];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss}")));
    }
    let mut grads = g.tape.backward(loss_var)?;
    let grads = g
        .param_vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::State("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchResult { loss, correct, grads })
}

/// Learning rate at `step` of `total` under the schedule.
pub fn scheduled_lr(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    match tc.lr_schedule {
        LrSchedule::Constant => tc.learning_rate,
        LrSchedule::LinearDecay => {
            let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
            tc.learning_rate * (1.0 - 0.9 * frac)
        }
    }
}

/// Shared epoch loop. `adjust` may add terms to the gradients (ADMM penalty, SR-STE decay)
/// and returns any extra loss; it sees the batch index within the epoch.
struct EpochRunner<'a> {
    data: &'a Dataset,
    tc: &'a TrainConfig,
    ap: &'a AttentionPruneConfig,
    phase: Phase,
    opt: OptimizerState,
    step: usize,
    total_steps: usize,
}

/// Per-batch hook that edits the gradients before the optimizer step and returns the
/// penalty it added to the loss.
type GradAdjust<'f> = dyn FnMut(&ModelParams, &mut [Matrix], usize) -> Result<f64> + 'f;

impl<'a> EpochRunner<'a> {
    fn new(params: &ModelParams, data: &'a Dataset, tc: &'a TrainConfig, ap: &'a AttentionPruneConfig, phase: Phase, epochs: usize) -> Self {
        let per_epoch = data.len().div_ceil(tc.batch_size);
        Self { data, tc, ap, phase, opt: OptimizerState::new(params), step: 0, total_steps: per_epoch * epochs }
    }

    fn run_epoch(
        &mut self,
        params: &mut ModelParams,
        masks: Option<&MaskSet>,
        epoch: usize,
        adjust: &mut GradAdjust<'_>,
    ) -> Result<EpochMetrics> {
        if self.data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let seed = mix_seed(self.tc.seed, self.phase, epoch);
        let iter = batches(self.data, self.tc.batch_size, seed, true)?.pad_multiple(pad_multiple(self.ap));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (bi, batch) in iter.enumerate() {
            let mut r = batch_gradients(params, masks, &batch, self.ap)?;
            adjust(params, &mut r.grads, bi)?;
            if let Some(c) = self.tc.grad_clip {
                optim::clip_global_norm(&mut r.grads, c);
            }
            let lr = scheduled_lr(self.tc, self.step, self.total_steps);
            optim::optimizer_step(params, &r.grads, &mut self.opt, lr, self.tc.weight_decay)?;
            self.step += 1;
            loss_sum += r.loss * batch.size() as f64;
            correct += r.correct;
            seen += batch.size();
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(EpochMetrics {
            phase: self.phase,
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            primal_residual: None,
            relative_residual: None,
            penalty: None,
        })
    }
}

/// Plain cross-entropy training of the dense model for `tc.epochs_dense` epochs.
pub fn train_dense(
    params: &mut ModelParams,
    data: &Dataset,
    tc: &TrainConfig,
    ap: &AttentionPruneConfig,
) -> Result<Vec<EpochMetrics>> {
    tc.validate()?;
    let mut runner = EpochRunner::new(params, data, tc, ap, Phase::Dense, tc.epochs_dense);
    let mut metrics = Vec::with_capacity(tc.epochs_dense);
    for epoch in 0..tc.epochs_dense {
        metrics.push(runner.run_epoch(params, None, epoch, &mut |_, _, _| Ok(0.0))?);
    }
    Ok(metrics)
}

/// Result of the ADMM phase.
#[derive(Clone, Debug)]
pub struct AdmmOutcome {
    pub report: AdmmReport,
    pub metrics: Vec<EpochMetrics>,
    pub states: Vec<AdmmState>,
}

/// The W-step over a full model: one training epoch of `f + Σ penalty`.
struct ModelSubproblem<'a, 'p> {
    params: &'p mut ModelParams,
    runner: EpochRunner<'a>,
    prunable: Vec<usize>,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
}

impl WSubproblem for ModelSubproblem<'_, '_> {
    fn solve(&mut self, states: &[AdmmState]) -> Result<f64> {
        let prunable = self.prunable.clone();
        let check = self.runner.tc.check_penalty_gradients;
        let mut adjust = |params: &ModelParams, grads: &mut [Matrix], bi: usize| -> Result<f64> {
            let mut extra = 0.0;
            for (st, &pi) in states.iter().zip(&prunable) {
                let w = &params.params[pi].value;
                let (value, pg) = admm::penalty(w, st)?;
                if check && bi == 0 {
                    // Central differences are exact on a quadratic, so a coarse step keeps
                    // round-off well below the tolerance.
                    let err = grad_check(|at| admm::penalty(at, st), w, 1e-2)?;
                    if err >= 1e-6 {
                        return Err(Error::Numeric(format!(
                            "penalty gradient of {} disagrees with finite differences (rel. err {err:e})",
                            st.target_id
                        )));
                    }
                }
                grads[pi].add_assign(&pg)?;
                extra += value;
            }
            Ok(extra)
        };
        let m = self.runner.run_epoch(self.params, None, self.epoch, &mut adjust)?;
        self.epoch += 1;
        let loss = m.loss;
        self.metrics.push(m);
        Ok(loss)
    }

    fn weight(&self, index: usize) -> &Matrix {
        &self.params.params[self.prunable[index]].value
    }
}

/// ADMM reshaping of every prunable matrix toward the pattern-sparse set.
///
/// Each state starts from `Z = Π(W)`, `U = 0`; every epoch then trains on the augmented
/// loss, projects `W + U` and updates the duals.
pub fn admm_phase(
    params: &mut ModelParams,
    data: &Dataset,
    tc: &TrainConfig,
    scfg: &SparsityConfig,
    ap: &AttentionPruneConfig,
) -> Result<AdmmOutcome> {
    tc.validate()?;
    scfg.validate()?;
    params.config.validate_for_pattern(scfg)?;
    let prunable = params.prunable_indices();
    let mut states = Vec::with_capacity(prunable.len());
    for &pi in &prunable {
        let p = &params.params[pi];
        let mut st = admm::init_state(p.name.clone(), &p.value, *scfg, tc.rho)?;
        st.pool_policy = tc.pool_policy;
        st.project_from(&p.value)?;
        states.push(st);
    }
    let runner = EpochRunner::new(params, data, tc, ap, Phase::Admm, tc.epochs_admm);
    let mut sub = ModelSubproblem { params, runner, prunable, epoch: 0, metrics: Vec::new() };
    let opts = IterateOptions { iterations: tc.epochs_admm, tolerance: tc.admm_tolerance };
    let report = admm::admm_iterate(&mut sub, &mut states, opts).map_err(|abort| abort.error)?;
    let mut metrics = sub.metrics;
    for (m, rec) in metrics.iter_mut().zip(&report.records) {
        m.primal_residual = Some(rec.primal_residual);
        m.relative_residual = Some(rec.relative_residual);
        m.penalty = Some(rec.penalty_value);
    }
    Ok(AdmmOutcome { report, metrics, states })
}

/// Replaces every prunable matrix by its pattern-pruned value and returns the masks.
pub fn hard_prune(params: &mut ModelParams, scfg: &SparsityConfig) -> Result<MaskSet> {
    scfg.validate()?;
    let mut masks = MaskSet::new();
    for pi in params.prunable_indices() {
        let p = &mut params.params[pi];
        let out = pattern::pattern_prune(&p.value, scfg)?;
        p.value = out.pruned;
        masks.insert(p.name.clone(), KeepMask::new(out.keep_mask)?);
    }
    Ok(masks)
}

fn check_mask_coverage(params: &ModelParams, masks: &MaskSet) -> Result<()> {
    for (name, w) in model::collect_prunable(params) {
        let km = masks.get(name).ok_or_else(|| Error::Input(format!("no keep mask for {name}")))?;
        w.same_shape(km.matrix(), "mask coverage")?;
    }
    Ok(())
}

/// Fine-tunes the pruned model with SR-STE. Forward passes always use `W ⊙ mask`; the
/// gradient with respect to the pruned weights, plus the decay on pruned entries, feeds
/// the AdamW moments. At the end the pruned entries are zeroed so the stored weights are
/// exactly sparse.
pub fn retrain_srste(
    params: &mut ModelParams,
    masks: &mut MaskSet,
    data: &Dataset,
    tc: &TrainConfig,
    sr: &SrsteConfig,
    scfg: &SparsityConfig,
    ap: &AttentionPruneConfig,
) -> Result<Vec<EpochMetrics>> {
    tc.validate()?;
    sr.validate()?;
    check_mask_coverage(params, masks)?;
    let prunable = params.prunable_indices();
    let mut runner = EpochRunner::new(params, data, tc, ap, Phase::Retrain, tc.epochs_retrain);
    let mut metrics = Vec::with_capacity(tc.epochs_retrain);
    for epoch in 0..tc.epochs_retrain {
        if sr.refresh_masks_per_epoch && epoch > 0 {
            for &pi in &prunable {
                let p = &params.params[pi];
                let out = pattern::pattern_prune(&p.value, scfg)?;
                masks.insert(p.name.clone(), KeepMask::new(out.keep_mask)?);
            }
        }
        let frozen = masks.clone();
        let mut adjust = |params: &ModelParams, grads: &mut [Matrix], _bi: usize| -> Result<f64> {
            for &pi in &prunable {
                let p = &params.params[pi];
                let km = &frozen[&p.name];
                grads[pi] = srste::srste_gradient(&p.value, &grads[pi], km, sr)?;
            }
            Ok(0.0)
        };
        metrics.push(runner.run_epoch(params, Some(&frozen), epoch, &mut adjust)?);
    }
    apply_masks(params, masks)?;
    Ok(metrics)
}

/// `W ← W ⊙ mask` for every masked prunable matrix.
pub fn apply_masks(params: &mut ModelParams, masks: &MaskSet) -> Result<()> {
    for pi in params.prunable_indices() {
        let p = &mut params.params[pi];
        if let Some(km) = masks.get(&p.name) {
            p.value = srste::prune_forward(&p.value, km)?;
        }
    }
    Ok(())
}

/// Accuracy and mean cross-entropy over `data`, evaluated in source order.
pub fn evaluate(
    params: &ModelParams,
    masks: Option<&MaskSet>,
    data: &Dataset,
    ap: &AttentionPruneConfig,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for batch in batches(data, 64, 0, false)?.pad_multiple(pad_multiple(ap)) {
        let mut g = model::forward_graph(params, masks, &batch, ap)?;
        let logits = g.tape.value(g.logits).clone();
        correct += (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == batch.labels[r]).count();
        let l = g.tape.cross_entropy(g.logits, &batch.labels)?;
        loss_sum += g.tape.value(l)[(0, 0)] * batch.size() as f64;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        n_examples: data.len(),
    })
}

/// Fraction of zero entries in the forward weights of all masked prunable matrices.
pub fn prunable_sparsity(params: &ModelParams, masks: &MaskSet) -> Result<f64> {
    let (mut zeros, mut total) = (0usize, 0usize);
    for (name, w) in model::collect_prunable(params) {
        let fw = match masks.get(name) {
            Some(km) => srste::prune_forward(w, km)?,
            None => w.clone(),
        };
        zeros += fw.len() - fw.count_nonzero();
        total += fw.len();
    }
    Ok(zeros as f64 / total.max(1) as f64)
}

/// Fraction of zero entries across all keep masks.
pub fn mask_sparsity(masks: &MaskSet) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for km in masks.values() {
        zeros += km.matrix().len() - km.kept();
        total += km.matrix().len();
    }
    zeros as f64 / total.max(1) as f64
}

/// Feasibility of every masked forward weight, by target id.
pub fn feasibility_audit(params: &ModelParams, masks: &MaskSet, scfg: &SparsityConfig) -> Result<Vec<(String, bool)>> {
    model::collect_prunable(params)
        .into_iter()
        .map(|(name, w)| {
            let fw = match masks.get(name) {
                Some(km) => srste::prune_forward(w, km)?,
                None => w.clone(),
            };
            Ok((String::from(name), pattern::is_feasible(&fw, scfg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec, TaskKind};
    use crate::model::EncoderConfig;

    fn setup() -> (ModelParams, Dataset, Dataset) {
        let spec = SyntheticSpec { task: TaskKind::ParityOfMarker, vocab_size: 8, seq_len: 8, n_train: 48, n_test: 16, seed: 3 };
        let (train, test) = gen_synthetic(&spec).unwrap();
        let cfg = EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 8, max_seq_len: 8, n_classes: 2 };
        (ModelParams::init(cfg, 1).unwrap(), train, test)
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut params, train, _) = setup();
        let before = params.clone();
        let tc = TrainConfig { epochs_dense: 0, ..TrainConfig::toy() };
        assert!(train_dense(&mut params, &train, &tc, &AttentionPruneConfig::default()).unwrap().is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn dense_training_is_deterministic() {
        let (p0, train, _) = setup();
        let tc = TrainConfig { epochs_dense: 2, ..TrainConfig::toy() };
        let ap = AttentionPruneConfig::default();
        let (mut a, mut b) = (p0.clone(), p0);
        let ma = train_dense(&mut a, &train, &tc, &ap).unwrap();
        let mb = train_dense(&mut b, &train, &tc, &ap).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn admm_rejects_zero_rho() {
        let (mut params, train, _) = setup();
        let tc = TrainConfig { rho: 0.0, ..TrainConfig::toy() };
        assert!(matches!(
            admm_phase(&mut params, &train, &tc, &SparsityConfig::default(), &AttentionPruneConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hard_prune_then_retrain_keeps_exact_sparsity() {
        let (mut params, train, test) = setup();
        let scfg = SparsityConfig::default();
        let tc = TrainConfig { epochs_admm: 1, epochs_retrain: 2, ..TrainConfig::toy() };
        let ap = AttentionPruneConfig::default();
        let out = admm_phase(&mut params, &train, &tc, &scfg, &ap).unwrap();
        assert_eq!(out.report.records.len(), 1);
        assert!(out.states.iter().all(|s| s.z_is_feasible().unwrap()));
        let mut masks = hard_prune(&mut params, &scfg).unwrap();
        assert_eq!(mask_sparsity(&masks), 0.5);
        assert!(feasibility_audit(&params, &masks, &scfg).unwrap().iter().all(|(_, ok)| *ok));
        retrain_srste(&mut params, &mut masks, &train, &tc, &SrsteConfig::default(), &scfg, &ap).unwrap();
        for (_, counts) in model::masked_block_counts(&params, &masks, &scfg).unwrap() {
            assert!(counts.iter().all(|&c| c <= 8));
        }
        let ev = evaluate(&params, Some(&masks), &test, &ap).unwrap();
        assert!((0.0..=1.0).contains(&ev.accuracy));
        assert_eq!(ev.n_examples, 16);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let (params, mut train, _) = setup();
        train.examples.clear();
        assert!(matches!(evaluate(&params, None, &train, &AttentionPruneConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn lr_schedule() {
        let tc = TrainConfig::toy();
        assert_eq!(scheduled_lr(&tc, 0, 10), tc.learning_rate);
        assert!((scheduled_lr(&tc, 10, 10) - 0.1 * tc.learning_rate).abs() < 1e-18);
        let c = TrainConfig { lr_schedule: LrSchedule::Constant, ..tc };
        assert_eq!(scheduled_lr(&c, 7, 10), tc.learning_rate);
    }
}
