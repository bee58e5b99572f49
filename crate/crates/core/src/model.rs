//! A small post-LN transformer encoder classifier with weight masking and dynamic
//! pattern pruning of attention maps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::pattern::{self, ProjectionMode, SparsityConfig};
use crate::srste::{self, KeepMask};

/// Score given to pruned attention positions before the softmax.
pub const ATTENTION_SENTINEL: f64 = -1e9;

/// Prunable weight kinds of one layer, in collection order.
pub const PRUNABLE_KINDS: [&str; 6] = ["wq", "wk", "wv", "wo", "ff1", "ff2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 32, n_heads: 2, d_ff: 64, vocab_size: 32, max_seq_len: 16, n_classes: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by model.n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every prunable matrix must tile exactly into blocks of `cfg`.
    pub fn validate_for_pattern(&self, cfg: &SparsityConfig) -> Result<()> {
        for (name, v) in [("d_model", self.d_model), ("d_ff", self.d_ff)] {
            if v % cfg.block_rows != 0 || v % cfg.block_cols != 0 {
                return Err(Error::Config(format!(
                    "model.{name} = {v} is not divisible by the {}x{} pattern block",
                    cfg.block_rows, cfg.block_cols
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Biases and layer-norm parameters are exempt from every decay term.
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub prunable: bool,
    pub value: Matrix,
}

/// All model parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub params: Vec<Param>,
}

/// Keep masks by prunable target id.
pub type MaskSet = BTreeMap<String, KeepMask>;

const PER_LAYER: usize = 16;

fn layer_name(l: usize, what: &str) -> String {
    format!("layer{l}.{what}")
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform weights, uniform embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(PER_LAYER * config.n_layers + 4);
        let uniform = |rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("positive dims")
        };
        let xavier = |fan_in: usize, fan_out: usize| math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let d = config.d_model;
        let mut push = |name: String, kind: ParamKind, prunable: bool, value: Matrix| {
            params.push(Param { name, kind, prunable, value });
        };
        push("embed.tok".into(), ParamKind::Embedding, false, uniform(config.vocab_size, d, 1.0, &mut rng));
        push("embed.pos".into(), ParamKind::Embedding, false, uniform(config.max_seq_len, d, 1.0, &mut rng));
        for l in 0..config.n_layers {
            for what in ["wq", "wk", "wv", "wo"] {
                push(layer_name(l, what), ParamKind::Weight, true, uniform(d, d, xavier(d, d), &mut rng));
                push(layer_name(l, &format!("b{}", &what[1..])), ParamKind::Bias, false, Matrix::zeros(1, d));
            }
            push(layer_name(l, "ln1.gain"), ParamKind::NormGain, false, Matrix::ones(1, d));
            push(layer_name(l, "ln1.bias"), ParamKind::NormBias, false, Matrix::zeros(1, d));
            let ff = config.d_ff;
            push(layer_name(l, "ff1"), ParamKind::Weight, true, uniform(d, ff, xavier(d, ff), &mut rng));
            push(layer_name(l, "bff1"), ParamKind::Bias, false, Matrix::zeros(1, ff));
            push(layer_name(l, "ff2"), ParamKind::Weight, true, uniform(ff, d, xavier(ff, d), &mut rng));
            push(layer_name(l, "bff2"), ParamKind::Bias, false, Matrix::zeros(1, d));
            push(layer_name(l, "ln2.gain"), ParamKind::NormGain, false, Matrix::ones(1, d));
            push(layer_name(l, "ln2.bias"), ParamKind::NormBias, false, Matrix::zeros(1, d));
        }
        let c = config.n_classes;
        push("head.w".into(), ParamKind::Weight, false, uniform(d, c, xavier(d, c), &mut rng));
        push("head.b".into(), ParamKind::Bias, false, Matrix::zeros(1, c));
        Ok(Self { config, params })
    }

    /// Rebuilds parameters from named values (e.g. a checkpoint), checking names and shapes.
    pub fn from_named(config: EncoderConfig, values: Vec<(String, Matrix)>) -> Result<Self> {
        let mut template = Self::init(config, 0)?;
        if values.len() != template.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter matrices, got {}",
                template.params.len(),
                values.len()
            )));
        }
        for (slot, (name, value)) in template.params.iter_mut().zip(values) {
            if slot.name != name {
                return Err(Error::Input(format!("expected parameter {}, found {name}", slot.name)));
            }
            if slot.value.shape() != value.shape() {
                return Err(Error::dim("from_named", slot.value.shape(), value.shape()));
            }
            slot.value = value;
        }
        Ok(template)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    /// Indices of prunable parameters in collection order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        self.params.iter().enumerate().filter(|(_, p)| p.prunable).map(|(i, _)| i).collect()
    }

    pub fn prunable_ids(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.prunable).map(|p| p.name.clone()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Prunable matrices in layer-major order, then Q, K, V, O, ff1, ff2.
pub fn collect_prunable(params: &ModelParams) -> Vec<(&str, &Matrix)> {
    params.params.iter().filter(|p| p.prunable).map(|p| (p.name.as_str(), &p.value)).collect()
}

/// How attention scores are ranked inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ScoreSelect {
    /// Largest signed scores (most attention mass).
    #[default]
    Value,
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AttentionPruneConfig {
    pub enabled: bool,
    /// Block shape and per-block keep count. Attention maps always use per-block top-k;
    /// the pool settings are ignored because the maps change with every input.
    pub cfg: SparsityConfig,
    pub sentinel: f64,
    pub select: ScoreSelect,
}

impl Default for AttentionPruneConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            cfg: SparsityConfig { mode: ProjectionMode::TopKOnly, ..SparsityConfig::default() },
            sentinel: ATTENTION_SENTINEL,
            select: ScoreSelect::Value,
        }
    }
}

/// Row-major keep flags for a score map: per block, the `keep_k` best scores.
pub fn attention_keep_mask(scores: &Matrix, ap: &AttentionPruneConfig) -> Result<Vec<bool>> {
    let cfg = &ap.cfg;
    cfg.validate()?;
    let grid = pattern::partition_rect(scores, cfg.block_rows, cfg.block_cols).map_err(|_| {
        Error::Config(format!(
            "sequence length {} is not divisible by the {}x{} attention block",
            scores.rows(),
            cfg.block_rows,
            cfg.block_cols
        ))
    })?;
    let mut keep = vec![false; scores.len()];
    let mut buf = Vec::with_capacity(cfg.block_area());
    for (i, j) in grid.blocks() {
        grid.read_block(scores, i, j, &mut buf);
        let kept = match ap.select {
            ScoreSelect::Value => pattern::topk_indices(&buf, cfg.keep_k, |v| v),
            ScoreSelect::Magnitude => pattern::topk_indices(&buf, cfg.keep_k, f64::abs),
        };
        let (r0, c0) = grid.origin(i, j);
        for idx in kept {
            keep[(r0 + idx / cfg.block_cols) * scores.cols() + c0 + idx % cfg.block_cols] = true;
        }
    }
    Ok(keep)
}

/// Pattern-prunes a pre-softmax score map: pruned entries become the sentinel.
pub fn attention_prune_scores(scores: &Matrix, ap: &AttentionPruneConfig) -> Result<Matrix> {
    if !ap.enabled {
        return Ok(scores.clone());
    }
    let keep = attention_keep_mask(scores, ap)?;
    let mut out = scores.clone();
    for (v, k) in out.as_mut_slice().iter_mut().zip(keep) {
        if !k {
            *v = ap.sentinel;
        }
    }
    Ok(out)
}

/// Attention probabilities of one head for one example, recorded during the forward pass.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    pub layer: usize,
    pub example: usize,
    pub head: usize,
    pub probs: Var,
    /// Keep flags, when attention pruning was active.
    pub keep: Option<Vec<bool>>,
}

/// A recorded forward pass.
pub struct ForwardGraph {
    pub tape: Tape,
    /// Leaf of every parameter, aligned with [`ModelParams::params`]. For masked prunable
    /// matrices the leaf holds `W ⊙ mask`, so its gradient is the gradient with respect to
    /// the pruned weight.
    pub param_vars: Vec<Var>,
    pub logits: Var,
    pub attention: Vec<AttentionProbe>,
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    let cfg = &params.config;
    if batch.size() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "batch sequence length {} exceeds max_seq_len {}",
            batch.seq_len, cfg.max_seq_len
        )));
    }
    if let Some(t) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {t} is out of vocabulary (size {})", cfg.vocab_size)));
    }
    if batch.lengths.iter().any(|&l| l == 0 || l > batch.seq_len) {
        return Err(Error::Input("sequence lengths must lie in [1, seq_len]".into()));
    }
    Ok(())
}

/// Builds the forward graph for `batch`. When `masks` is given, every masked prunable
/// matrix is replaced by its pruned value.
pub fn forward_graph(
    params: &ModelParams,
    masks: Option<&MaskSet>,
    batch: &Batch,
    ap: &AttentionPruneConfig,
) -> Result<ForwardGraph> {
    check_batch(params, batch)?;
    let cfg = params.config;
    let (bsz, len) = (batch.size(), batch.seq_len);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let mut tape = Tape::new();

    let mut param_vars = Vec::with_capacity(params.params.len());
    for p in &params.params {
        let value = match masks.and_then(|m| m.get(&p.name)) {
            Some(km) if p.prunable => srste::prune_forward(&p.value, km)?,
            _ => p.value.clone(),
        };
        param_vars.push(tape.leaf(value));
    }
    let pv = |name: &str| -> Var { param_vars[params.index_of(name).expect("known parameter")] };

    let tok = tape.gather_rows(pv("embed.tok"), &batch.tokens)?;
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
    let pos = tape.gather_rows(pv("embed.pos"), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let key_masks: Vec<Option<Var>> = (0..bsz).map(|b| batch.key_mask(b).map(|m| tape.constant(m))).collect();
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut attention = Vec::new();

    for l in 0..cfg.n_layers {
        let name = |w: &str| layer_name(l, w);
        let proj = |x: Var, w: &str, b: &str, tape: &mut Tape| -> Result<Var> {
            let y = tape.matmul(x, pv(&name(w)))?;
            tape.add(y, pv(&name(b)))
        };
        let q = proj(x, "wq", "bq", &mut tape)?;
        let k = proj(x, "wk", "bk", &mut tape)?;
        let v = proj(x, "wv", "bv", &mut tape)?;

        let mut per_example = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let qb = tape.slice_rows(q, b * len, len)?;
            let kb = tape.slice_rows(k, b * len, len)?;
            let vb = tape.slice_rows(v, b * len, len)?;
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (qb, kb, vb)
                } else {
                    (
                        tape.slice_cols(qb, h * dh, dh)?,
                        tape.slice_cols(kb, h * dh, dh)?,
                        tape.slice_cols(vb, h * dh, dh)?,
                    )
                };
                let raw = tape.matmul_bt(qh, kh)?;
                let mut scores = tape.scale(raw, scale)?;
                if let Some(km) = key_masks[b] {
                    scores = tape.add(scores, km)?;
                }
                let mut keep = None;
                if ap.enabled {
                    let flags = attention_keep_mask(tape.value(scores), ap)?;
                    scores = tape.masked_fill(scores, &flags, ap.sentinel)?;
                    keep = Some(flags);
                }
                let probs = tape.softmax_rows(scores)?;
                attention.push(AttentionProbe { layer: l, example: b, head: h, probs, keep });
                head_out.push(tape.matmul(probs, vh)?);
            }
            per_example.push(if heads == 1 { head_out[0] } else { tape.concat_cols(&head_out)? });
        }
        let ctx = if bsz == 1 { per_example[0] } else { tape.concat_rows(&per_example)? };
        let attn = proj(ctx, "wo", "bo", &mut tape)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, pv(&name("ln1.gain")), pv(&name("ln1.bias")))?;

        let hidden = proj(x, "ff1", "bff1", &mut tape)?;
        let act = tape.gelu(hidden)?;
        let ff = proj(act, "ff2", "bff2", &mut tape)?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, pv(&name("ln2.gain")), pv(&name("ln2.bias")))?;
    }

    // Mean over the real (unpadded) positions of each sequence.
    let mut pool = Matrix::zeros(bsz, bsz * len);
    for b in 0..bsz {
        let n = batch.lengths[b];
        for i in 0..n {
            pool[(b, b * len + i)] = 1.0 / n as f64;
        }
    }
    let pool = tape.constant(pool);
    let pooled = tape.matmul(pool, x)?;
    let logits = tape.matmul(pooled, pv("head.w"))?;
    let logits = tape.add(logits, pv("head.b"))?;
    Ok(ForwardGraph { tape, param_vars, logits, attention })
}

/// Logits for `batch` (`batch × n_classes`).
pub fn forward(
    params: &ModelParams,
    masks: Option<&MaskSet>,
    batch: &Batch,
    ap: &AttentionPruneConfig,
) -> Result<Matrix> {
    let g = forward_graph(params, masks, batch, ap)?;
    Ok(g.tape.value(g.logits).clone())
}

/// Per-block nonzero counts of every masked prunable matrix's forward weight.
pub fn masked_block_counts(params: &ModelParams, masks: &MaskSet, cfg: &SparsityConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (name, w) in collect_prunable(params) {
        if let Some(km) = masks.get(name) {
            let fw = srste::prune_forward(w, km)?;
            out.push((String::from(name), pattern::block_popcounts(&fw, cfg.block_rows, cfg.block_cols)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;

    fn tiny() -> EncoderConfig {
        EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 10, max_seq_len: 8, n_classes: 3 }
    }

    fn batch_of(seqs: &[&[usize]], pad_multiple: usize) -> Batch {
        let ex: Vec<Example> = seqs.iter().map(|s| Example { tokens: s.to_vec(), label: 0 }).collect();
        let refs: Vec<&Example> = ex.iter().collect();
        Batch::from_examples(&refs, pad_multiple)
    }

    #[test]
    fn prunable_collection_order_and_counts() {
        let params = ModelParams::init(EncoderConfig::default(), 1).unwrap();
        let ids: Vec<&str> = collect_prunable(&params).into_iter().map(|(n, _)| n).collect();
        assert_eq!(ids.len(), 12);
        assert_eq!(&ids[..7], &["layer0.wq", "layer0.wk", "layer0.wv", "layer0.wo", "layer0.ff1", "layer0.ff2", "layer1.wq"]);
        let bert = EncoderConfig { n_layers: 12, d_model: 8, d_ff: 16, ..EncoderConfig::default() };
        assert_eq!(collect_prunable(&ModelParams::init(bert, 0).unwrap()).len(), 72);
        assert!(params.params.iter().filter(|p| p.prunable).all(|p| p.kind == ParamKind::Weight));
        assert!(!params.params.iter().any(|p| p.prunable && p.name.starts_with("head")));
    }

    #[test]
    fn all_ones_masks_match_unmasked() {
        let params = ModelParams::init(tiny(), 3).unwrap();
        let batch = batch_of(&[&[2, 3, 4, 5], &[6, 7, 8, 9]], 1);
        let ap = AttentionPruneConfig::default();
        let masks: MaskSet = collect_prunable(&params)
            .into_iter()
            .map(|(n, w)| (String::from(n), KeepMask::ones(w.rows(), w.cols())))
            .collect();
        assert_eq!(forward(&params, None, &batch, &ap).unwrap(), forward(&params, Some(&masks), &batch, &ap).unwrap());
    }

    #[test]
    fn identical_sequences_give_identical_rows() {
        let params = ModelParams::init(tiny(), 4).unwrap();
        let batch = batch_of(&[&[2, 5, 4, 1], &[2, 5, 4, 1], &[2, 5, 4, 1]], 1);
        let logits = forward(&params, None, &batch, &AttentionPruneConfig::default()).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(1), logits.row(2));
    }

    #[test]
    fn padding_does_not_change_logits() {
        let params = ModelParams::init(tiny(), 5).unwrap();
        let ap = AttentionPruneConfig::default();
        let alone = forward(&params, None, &batch_of(&[&[3, 4, 5]], 1), &ap).unwrap();
        let padded = forward(&params, None, &batch_of(&[&[3, 4, 5], &[2, 2, 2, 2, 2, 2]], 1), &ap).unwrap();
        assert_eq!(alone.row(0), padded.row(0));
    }

    #[test]
    fn rejects_out_of_vocab_and_bad_divisibility() {
        let params = ModelParams::init(tiny(), 6).unwrap();
        let ap = AttentionPruneConfig::default();
        assert!(matches!(forward(&params, None, &batch_of(&[&[3, 10]], 1), &ap), Err(Error::Input(_))));
        let ap = AttentionPruneConfig { enabled: true, ..AttentionPruneConfig::default() };
        assert!(matches!(forward(&params, None, &batch_of(&[&[3, 4, 5, 6, 7, 8]], 1), &ap), Err(Error::Config(_))));
        let bad = EncoderConfig { d_model: 9, ..tiny() };
        assert!(ModelParams::init(bad, 0).is_err());
        assert!(EncoderConfig { d_ff: 6, ..tiny() }.validate_for_pattern(&SparsityConfig::default()).is_err());
    }

    #[test]
    fn attention_prune_examples() {
        let scores = Matrix::from_vec(4, 4, (0..16).map(|v| v as f64 * 0.1).collect()).unwrap();
        let keep_all = AttentionPruneConfig {
            enabled: true,
            cfg: SparsityConfig::square(4, 16, 1, ProjectionMode::TopKOnly).unwrap(),
            ..Default::default()
        };
        assert_eq!(attention_prune_scores(&scores, &keep_all).unwrap(), scores);

        let ap = AttentionPruneConfig { enabled: true, ..Default::default() };
        let constant = Matrix::filled(4, 4, 0.3);
        let pruned = attention_prune_scores(&constant, &ap).unwrap();
        for i in 0..16 {
            let expected = if i < 8 { 0.3 } else { ATTENTION_SENTINEL };
            assert_eq!(pruned.as_slice()[i], expected);
        }
        // Rows 0 and 1 keep everything; rows 2 and 3 lost every entry, so their softmax
        // spreads evenly over pruned slots.
        let probs = crate::autodiff::softmax_rows_value(&pruned);
        assert!((probs[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((probs[(3, 0)] - 0.25).abs() < 1e-12);

        // Keeping two entries leaves row 0 half pruned: the pruned half gets no mass.
        let two = AttentionPruneConfig { cfg: SparsityConfig::square(4, 2, 1, ProjectionMode::TopKOnly).unwrap(), ..ap };
        let probs = crate::autodiff::softmax_rows_value(&attention_prune_scores(&constant, &two).unwrap());
        assert!((probs[(0, 0)] - 0.5).abs() < 1e-12 && (probs[(0, 1)] - 0.5).abs() < 1e-12);
        assert!(probs[(0, 2)] < 1e-30 && probs[(0, 3)] < 1e-30);

        // Signed selection keeps the largest values, magnitude selection the largest |values|.
        let s = Matrix::from_rows(&[[-5.0, 1.0], [2.0, 0.5]]);
        let cfg = SparsityConfig::square(2, 1, 1, ProjectionMode::TopKOnly).unwrap();
        let by_value = AttentionPruneConfig { enabled: true, cfg, ..Default::default() };
        assert_eq!(attention_keep_mask(&s, &by_value).unwrap(), vec![false, false, true, false]);
        let by_mag = AttentionPruneConfig { select: ScoreSelect::Magnitude, ..by_value };
        assert_eq!(attention_keep_mask(&s, &by_mag).unwrap(), vec![true, false, false, false]);
    }

    #[test]
    fn from_named_checks_layout() {
        let params = ModelParams::init(tiny(), 7).unwrap();
        let named: Vec<(String, Matrix)> = params.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        assert_eq!(ModelParams::from_named(tiny(), named.clone()).unwrap(), params);
        let mut wrong = named;
        wrong.swap(0, 1);
        assert!(ModelParams::from_named(tiny(), wrong).is_err());
    }
}
