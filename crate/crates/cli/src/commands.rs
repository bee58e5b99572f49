//! Pipeline stages as file-to-file commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patprune_core::data::Dataset;
use patprune_core::model::{MaskSet, ModelParams};
use patprune_core::trainer::{self, EvalResult};
use serde::Serialize;

use crate::analysis::{self, HistogramReport};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::data_io;
use crate::metrics::{MetricsLog, Record};

pub const DENSE_CKPT: &str = "dense.ckpt";
pub const ADMM_CKPT: &str = "admm.ckpt";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const RETRAINED_CKPT: &str = "retrained.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const EVAL: &str = "eval.json";

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    write(out, RESOLVED_NAME, &cfg.to_toml())
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn save(out: &Path, name: &str, ck: &Checkpoint) -> Result<()> {
    let path = out.join(name);
    ck.save(&path).with_context(|| format!("cannot write checkpoint {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_matching(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.params.config != cfg.model {
        bail!("checkpoint {} was trained with a different model configuration", path.display());
    }
    Ok(ck)
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = data_io::load_datasets(&cfg.data)?;
    if train.vocab.len() > cfg.model.vocab_size {
        bail!("model.vocab_size = {} is smaller than the data vocabulary ({} tokens)", cfg.model.vocab_size, train.vocab.len());
    }
    if train.n_classes > cfg.model.n_classes {
        bail!("model.n_classes = {} is smaller than the {} labels in the data", cfg.model.n_classes, train.n_classes);
    }
    Ok((train, test))
}

/// Stage summary: evaluation plus mask audit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub format: &'static str,
    pub version: u32,
    pub stage: Stage,
    #[serde(flatten)]
    pub result: EvalResult,
    pub prunable_sparsity: f64,
    pub feasibility: BTreeMap<String, bool>,
}

impl EvalReport {
    pub fn all_feasible(&self) -> bool {
        self.feasibility.values().all(|&ok| ok)
    }

    fn record(&self, stage: &str) -> Record {
        Record::Eval {
            stage: stage.into(),
            result: self.result,
            prunable_sparsity: self.prunable_sparsity,
            all_feasible: self.all_feasible(),
        }
    }
}

fn eval_report(cfg: &RunConfig, stage: Stage, params: &ModelParams, masks: Option<&MaskSet>, test: &Dataset) -> Result<EvalReport> {
    let result = trainer::evaluate(params, masks, test, &cfg.attention)?;
    let empty = MaskSet::new();
    let masks_or_empty = masks.unwrap_or(&empty);
    let feasibility = trainer::feasibility_audit(params, masks_or_empty, &cfg.sparsity)?.into_iter().collect();
    Ok(EvalReport {
        format: "patprune-eval",
        version: 1,
        stage,
        result,
        prunable_sparsity: trainer::prunable_sparsity(params, masks_or_empty)?,
        feasibility,
    })
}

pub fn train_dense(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let (train, test) = datasets(cfg)?;
    let mut params = ModelParams::init(cfg.model, cfg.seed)?;
    let mut log = MetricsLog::default();
    log.extend_epochs(trainer::train_dense(&mut params, &train, &cfg.train, &cfg.attention)?);
    let report = eval_report(cfg, Stage::Dense, &params, None, &test)?;
    log.push(report.record("dense"));
    save(out, DENSE_CKPT, &Checkpoint { stage: Stage::Dense, params, masks: None })?;
    write(out, "metrics-dense.jsonl", &log.render())?;
    Ok(report)
}

/// ADMM phase (skipped when `epochs_admm = 0`) followed by hard pruning.
fn admm_and_prune(cfg: &RunConfig, params: &mut ModelParams, train: &Dataset, log: &mut MetricsLog, out: &Path) -> Result<MaskSet> {
    if cfg.train.epochs_admm > 0 {
        let outcome = trainer::admm_phase(params, train, &cfg.train, &cfg.sparsity, &cfg.attention)?;
        log.extend_epochs(outcome.metrics);
    }
    save(out, ADMM_CKPT, &Checkpoint { stage: Stage::Admm, params: params.clone(), masks: None })?;
    Ok(trainer::hard_prune(params, &cfg.sparsity)?)
}

pub fn admm_prune(cfg: &RunConfig, out: &Path, from: Option<&Path>) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let input = from.map(Path::to_path_buf).unwrap_or_else(|| out.join(DENSE_CKPT));
    let mut params = load_matching(cfg, &input)?.params;
    let (train, test) = datasets(cfg)?;
    let mut log = MetricsLog::default();
    let masks = admm_and_prune(cfg, &mut params, &train, &mut log, out)?;
    let report = eval_report(cfg, Stage::Pruned, &params, Some(&masks), &test)?;
    log.push(report.record("pruned"));
    save(out, PRUNED_CKPT, &Checkpoint { stage: Stage::Pruned, params, masks: Some(masks) })?;
    write(out, "metrics-admm.jsonl", &log.render())?;
    Ok(report)
}

pub fn retrain(cfg: &RunConfig, out: &Path, from: Option<&Path>) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let input = from.map(Path::to_path_buf).unwrap_or_else(|| out.join(PRUNED_CKPT));
    let ck = load_matching(cfg, &input)?;
    let Some(mut masks) = ck.masks else {
        bail!("checkpoint {} has no keep masks; run admm-prune first", input.display());
    };
    let mut params = ck.params;
    let (train, test) = datasets(cfg)?;
    let mut log = MetricsLog::default();
    log.extend_epochs(trainer::retrain_srste(&mut params, &mut masks, &train, &cfg.train, &cfg.srste, &cfg.sparsity, &cfg.attention)?);
    let report = eval_report(cfg, Stage::Retrained, &params, Some(&masks), &test)?;
    log.push(report.record("retrained"));
    save(out, RETRAINED_CKPT, &Checkpoint { stage: Stage::Retrained, params, masks: Some(masks) })?;
    write(out, "metrics-retrain.jsonl", &log.render())?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let input = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(RETRAINED_CKPT));
    let ck = load_matching(cfg, &input)?;
    let (_, test) = datasets(cfg)?;
    let report = eval_report(cfg, ck.stage, &ck.params, ck.masks.as_ref(), &test)?;
    write(out, EVAL, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Dense training, ADMM, hard prune, SR-STE retraining and evaluation in one run.
pub fn full_pipeline(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    prepare_out(cfg, out)?;
    let (train, test) = datasets(cfg)?;
    let mut log = MetricsLog::default();
    let mut params = ModelParams::init(cfg.model, cfg.seed)?;
    log.extend_epochs(trainer::train_dense(&mut params, &train, &cfg.train, &cfg.attention)?);
    log.push(eval_report(cfg, Stage::Dense, &params, None, &test)?.record("dense"));
    save(out, DENSE_CKPT, &Checkpoint { stage: Stage::Dense, params: params.clone(), masks: None })?;

    let mut masks = admm_and_prune(cfg, &mut params, &train, &mut log, out)?;
    log.push(eval_report(cfg, Stage::Pruned, &params, Some(&masks), &test)?.record("pruned"));
    save(out, PRUNED_CKPT, &Checkpoint { stage: Stage::Pruned, params: params.clone(), masks: Some(masks.clone()) })?;

    log.extend_epochs(trainer::retrain_srste(&mut params, &mut masks, &train, &cfg.train, &cfg.srste, &cfg.sparsity, &cfg.attention)?);
    let report = eval_report(cfg, Stage::Retrained, &params, Some(&masks), &test)?;
    log.push(report.record("retrained"));
    save(out, RETRAINED_CKPT, &Checkpoint { stage: Stage::Retrained, params, masks: Some(masks) })?;
    write(out, METRICS, &log.render())?;
    write(out, EVAL, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Options of `analyze-distribution`; unset values come from the configuration.
#[derive(Clone, Debug, Default)]
pub struct AnalyzeOptions {
    pub target: Option<String>,
    pub sections: Option<usize>,
    pub epsilon: Option<f64>,
    pub bins: Option<usize>,
}

/// Writes the histogram tables and summary for one matrix of a checkpoint; returns the
/// report and the written paths.
pub fn analyze_distribution(cfg: &RunConfig, out: &Path, checkpoint: &Path, opts: &AnalyzeOptions) -> Result<(HistogramReport, Vec<PathBuf>)> {
    let ck = load_checkpoint(checkpoint)?;
    let target = opts.target.clone().unwrap_or_else(|| cfg.analysis.target.clone());
    let Some(w) = ck.params.get(&target) else {
        bail!("unknown target {target:?}; valid ids: {}", ck.params.prunable_ids().join(", "));
    };
    // Pruned checkpoints are analyzed as the forward pass sees them.
    let w = match ck.masks.as_ref().and_then(|m| m.get(&target)) {
        Some(km) => patprune_core::srste::prune_forward(w, km)?,
        None => w.clone(),
    };
    let report = analysis::analyze(
        &target,
        &w,
        opts.sections.unwrap_or(cfg.analysis.sections),
        opts.bins.unwrap_or(cfg.analysis.bins),
        opts.epsilon.unwrap_or(cfg.analysis.epsilon),
        &cfg.sparsity,
    )?;
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let base = format!("{stem}.{target}");
    let files = [
        (format!("{base}.whole.tsv"), report.whole_table()),
        (format!("{base}.sections.tsv"), report.sections_table()),
        (format!("{base}.summary.json"), report.summary_json() + "\n"),
    ];
    let mut paths = Vec::new();
    for (name, contents) in files {
        write(out, &name, &contents)?;
        paths.push(out.join(name));
    }
    Ok((report, paths))
}

pub fn export_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let (train, test) = datasets(cfg)?;
    write(out, "dataset.json", &data_io::export_json(&train, &test))?;
    Ok(out.join("dataset.json"))
}
