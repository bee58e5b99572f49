//! Desk-scale property suites behind the `verify` command.
//!
//! Each property compares the library against a brute-force or closed-form reference
//! on seeded random inputs.

use std::time::{Duration, Instant};

use patprune_core::admm::{self, AdmmState, IterateOptions, WSubproblem};
use patprune_core::autodiff::{self, grad_check, Tape};
use patprune_core::data::{self, Batch, SyntheticSpec};
use patprune_core::model::{self, AttentionPruneConfig, EncoderConfig, ModelParams};
use patprune_core::pattern::{self, PatternMask, PatternPool, ProjectionMode, SparsityConfig};
use patprune_core::srste::{self, KeepMask, SrsteConfig};
use patprune_core::trainer;
use patprune_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::sparsity_presets;

/// Deliberate defects for checking that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Top-k selection without the lower-index tie-break.
    SkipTieBreak,
}

pub struct Property {
    pub suite: &'static str,
    pub name: &'static str,
    run: fn(&Ctx) -> Result<(), String>,
}

struct Ctx {
    fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub suite: &'static str,
    pub name: &'static str,
    pub result: Result<(), String>,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        let status = if self.result.is_ok() { "PASS" } else { "FAIL" };
        let mut s = format!("{status} {}/{} ({:.2}s)", self.suite, self.name, self.elapsed.as_secs_f64());
        if let Err(e) = &self.result {
            s.push_str(": ");
            s.push_str(e);
        }
        s
    }
}

pub fn properties() -> Vec<Property> {
    macro_rules! p {
        ($suite:literal, $name:literal, $f:expr) => {
            Property { suite: $suite, name: $name, run: $f }
        };
    }
    vec![
        p!("projection", "topk-matches-exhaustive", topk_matches_exhaustive),
        p!("projection", "topk-determinism", topk_determinism),
        p!("projection", "exact-block-cardinality", exact_block_cardinality),
        p!("projection", "idempotence", idempotence),
        p!("projection", "mode-ordering", mode_ordering),
        p!("projection", "nm-group-cardinality", nm_group_cardinality),
        p!("pool", "match-equals-scan", pool_match_equals_scan),
        p!("pool", "frequency-order", pool_frequency_order),
        p!("admm", "penalty-finite-differences", penalty_fd),
        p!("admm", "toy-quadratic", admm_toy_quadratic),
        p!("srste", "decay-support-and-rate", srste_decay),
        p!("autodiff", "model-gradient-check", model_gradient_check),
        p!("attention", "softmax-normalization", attention_normalization),
        p!("data", "bounds-and-padding", data_bounds_and_padding),
        p!("feasibility", "hard-prune-presets", hard_prune_presets),
    ]
}

pub fn suites() -> Vec<&'static str> {
    let mut s: Vec<&'static str> = properties().iter().map(|p| p.suite).collect();
    s.dedup();
    s
}

/// Runs every property whose suite is in `filter` (all when empty).
pub fn run(filter: &[String], fault: Option<Fault>) -> Vec<Outcome> {
    let ctx = Ctx { fault };
    properties()
        .into_iter()
        .filter(|p| filter.is_empty() || filter.iter().any(|f| f == p.suite))
        .map(|p| {
            let t = Instant::now();
            let result = (p.run)(&ctx);
            Outcome { suite: p.suite, name: p.name, result, elapsed: t.elapsed() }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("nonempty")
}

/// Top-k selection under test: the library, or a faulty variant that resolves ties
/// toward higher indices.
fn select_topk(ctx: &Ctx, block: &[f64], k: usize) -> Result<PatternMask, String> {
    match ctx.fault {
        None => pattern::topk_mask_of(block, 4, 4, k).map_err(err),
        Some(Fault::SkipTieBreak) => {
            let mut idx: Vec<usize> = (0..block.len()).collect();
            idx.sort_by(|&a, &b| block[a].abs().total_cmp(&block[b].abs()));
            Ok(PatternMask::from_indices(4, 4, &idx[block.len() - k..]))
        }
    }
}

/// All 16-bit masks with `k` bits set.
fn all_masks(k: u32) -> Vec<u16> {
    (0..=u16::MAX).filter(|m| m.count_ones() == k).collect()
}

/// Bit `i` of a 16-bit mask marks entry `i` as kept.
fn kept_energy(block: &[f64], mask: u16) -> f64 {
    (0..16).filter(|i| mask >> i & 1 == 1).map(|i| block[i] * block[i]).sum()
}

fn topk_matches_exhaustive(ctx: &Ctx) -> Result<(), String> {
    let masks = all_masks(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..200 {
        let block: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let best = masks.iter().copied().max_by(|&a, &b| kept_energy(&block, a).total_cmp(&kept_energy(&block, b))).unwrap();
        let got = select_topk(ctx, &block, 8)?;
        let expect: Vec<usize> = (0..16).filter(|i| best >> i & 1 == 1).collect();
        ensure(got == PatternMask::from_indices(4, 4, &expect), || format!("block {t}: top-k differs from exhaustive argmin"))?;
    }
    Ok(())
}

fn topk_determinism(ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in 0..300 {
        // Few distinct magnitudes force ties.
        let block: Vec<f64> = (0..16).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
        let k = rng.gen_range(1..16);
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&a, &b| block[b].abs().total_cmp(&block[a].abs()).then(a.cmp(&b)));
        let expect = PatternMask::from_indices(4, 4, &order[..k]);
        let got = select_topk(ctx, &block, k)?;
        ensure(got == expect, || format!("case {t}: ties not resolved toward lower indices"))?;
    }
    Ok(())
}

fn exact_block_cardinality(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for mode in [ProjectionMode::PoolConstrained, ProjectionMode::TopKOnly] {
        for k in [1, 5, 8, 15] {
            let cfg = SparsityConfig::square(4, k, 8, mode).map_err(err)?;
            let w = random_matrix(&mut rng, 16, 24);
            let out = pattern::pattern_prune(&w, &cfg).map_err(err)?;
            let counts = pattern::block_popcounts(&out.keep_mask, 4, 4).map_err(err)?;
            ensure(counts.iter().all(|&c| c == k), || format!("{mode:?} k={k}: block counts {counts:?}"))?;
            let nz = pattern::block_popcounts(&out.pruned.map(|v| (v != 0.0) as u8 as f64), 4, 4).map_err(err)?;
            ensure(nz == counts, || format!("{mode:?} k={k}: pruned support differs from mask"))?;
        }
    }
    Ok(())
}

fn idempotence(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for mode in [ProjectionMode::PoolConstrained, ProjectionMode::TopKOnly] {
        let cfg = SparsityConfig { mode, pool_size: 6, ..SparsityConfig::default() };
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 16, 16);
            let once = pattern::pattern_prune(&w, &cfg).map_err(err)?.pruned;
            let twice = pattern::pattern_prune(&once, &cfg).map_err(err)?.pruned;
            ensure(once == twice, || format!("{mode:?}: projecting twice changed the result"))?;
            ensure(pattern::is_feasible(&once, &cfg).map_err(err)?, || format!("{mode:?}: projection infeasible"))?;
        }
    }
    Ok(())
}

fn mode_ordering(_: &Ctx) -> Result<(), String> {
    // The pool constraint can only lose energy relative to free per-block top-k.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..30 {
        let w = random_matrix(&mut rng, 16, 16);
        let pool = SparsityConfig { pool_size: 3, ..SparsityConfig::default() };
        let free = SparsityConfig { mode: ProjectionMode::TopKOnly, ..pool };
        let a = pattern::pattern_prune(&w, &pool).map_err(err)?.pruned.frobenius_sq();
        let b = pattern::pattern_prune(&w, &free).map_err(err)?.pruned.frobenius_sq();
        ensure(a <= b + 1e-12, || format!("pool-constrained kept energy {a} exceeds top-k {b}"))?;
    }
    Ok(())
}

fn nm_group_cardinality(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = pattern::nm_config(4, 2).map_err(err)?;
    let w = random_matrix(&mut rng, 8, 32);
    let out = pattern::pattern_prune(&w, &cfg).map_err(err)?;
    for r in 0..8 {
        for g in 0..8 {
            let kept = (0..4).filter(|j| out.keep_mask[(r, g * 4 + j)] == 1.0).count();
            ensure(kept == 2, || format!("row {r} group {g} keeps {kept}"))?;
        }
    }
    Ok(())
}

fn pool_match_equals_scan(_: &Ctx) -> Result<(), String> {
    let masks = all_masks(8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for t in 0..300 {
        let chosen: Vec<u16> = (0..32).map(|_| masks[rng.gen_range(0..masks.len())]).collect();
        let pool = PatternPool {
            masks: chosen.iter().map(|&m| PatternMask::from_indices(4, 4, &(0..16).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>())).collect(),
            source: "verify".into(),
        };
        let block = random_matrix(&mut rng, 4, 4);
        let mut best = 0;
        for (i, &m) in chosen.iter().enumerate() {
            if kept_energy(block.as_slice(), m) > kept_energy(block.as_slice(), chosen[best]) {
                best = i;
            }
        }
        let got = pattern::match_block_to_pool(&block, &pool).map_err(err)?;
        ensure(got == best, || format!("case {t}: matched pool index {got}, scan found {best}"))?;
    }
    Ok(())
}

fn pool_frequency_order(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w = random_matrix(&mut rng, 32, 32);
    let cfg = SparsityConfig { pool_size: 5, keep_k: 12, ..SparsityConfig::default() };
    let pool = pattern::build_pattern_pool(&w, &cfg).map_err(err)?;
    let grid = pattern::partition(&w, 4).map_err(err)?;
    let mut buf = Vec::new();
    let mut freq = std::collections::BTreeMap::new();
    for (i, j) in grid.blocks() {
        grid.read_block(&w, i, j, &mut buf);
        *freq.entry(pattern::topk_mask_of(&buf, 4, 4, 12).map_err(err)?.key()).or_insert(0usize) += 1;
    }
    let mut ranked: Vec<(u128, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let expect: Vec<u128> = ranked.iter().take(5).map(|r| r.0).collect();
    let got: Vec<u128> = pool.masks.iter().map(PatternMask::key).collect();
    ensure(got == expect, || "pool is not the most frequent masks in (count desc, key asc) order".into())
}

fn random_state(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<(Matrix, AdmmState), String> {
    let w = random_matrix(rng, rows, cols);
    let mut st = admm::init_state("w", &w, SparsityConfig::default(), 0.01).map_err(err)?;
    st.z = random_matrix(rng, rows, cols);
    st.u = random_matrix(rng, rows, cols);
    Ok((w, st))
}

fn penalty_fd(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..10 {
        let (w, st) = random_state(&mut rng, 8, 8)?;
        let (value, _) = admm::penalty(&w, &st).map_err(err)?;
        let direct = 0.5 * st.rho * w.sub(&st.z).and_then(|d| d.add(&st.u)).map_err(err)?.frobenius_sq();
        ensure((value - direct).abs() < 1e-12, || format!("penalty value {value} vs {direct}"))?;
        // Central differences are exact on a quadratic, so a wide step only shrinks round-off.
        let rel = grad_check(|at| admm::penalty(at, &st), &w, 1e-2).map_err(err)?;
        ensure(rel < 1e-7, || format!("penalty gradient rel. err {rel:e}"))?;
    }
    Ok(())
}

struct Quadratic {
    a: Matrix,
    w: Matrix,
}

impl WSubproblem for Quadratic {
    fn solve(&mut self, states: &[AdmmState]) -> patprune_core::Result<f64> {
        // argmin ½‖W−A‖² + ρ/2‖W−Z+U‖² in closed form.
        let st = &states[0];
        let target = st.z.sub(&st.u)?;
        self.w = self.a.zip_map(&target, "quadratic w-step", |a, t| (a + st.rho * t) / (1.0 + st.rho))?;
        Ok(0.5 * self.w.sub(&self.a)?.frobenius_sq())
    }

    fn weight(&self, _: usize) -> &Matrix {
        &self.w
    }
}

fn admm_toy_quadratic(_: &Ctx) -> Result<(), String> {
    let masks = all_masks(8);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let a = random_matrix(&mut rng, 4, 4);
    let cfg = SparsityConfig { mode: ProjectionMode::TopKOnly, ..SparsityConfig::default() };
    let mut st = admm::init_state("a", &a, cfg, 0.01).map_err(err)?;
    st.project_from(&a).map_err(err)?;
    let mut sub = Quadratic { w: a.clone(), a: a.clone() };
    admm::admm_iterate(&mut sub, std::slice::from_mut(&mut st), IterateOptions { iterations: 200, tolerance: None })
        .map_err(|e| e.error.to_string())?;
    let feasible = pattern::pattern_prune(&sub.w, &cfg).map_err(err)?.pruned;
    let f = 0.5 * feasible.sub(&a).map_err(err)?.frobenius_sq();
    let total: f64 = a.frobenius_sq();
    let best = masks.iter().map(|&m| 0.5 * (total - kept_energy(a.as_slice(), m))).fold(f64::INFINITY, f64::min);
    ensure(f <= best * 1.01, || format!("objective {f} exceeds optimum {best} by more than 1%"))
}

fn srste_decay(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = random_matrix(&mut rng, 8, 8);
    let km = KeepMask::new(pattern::pattern_prune(&w, &SparsityConfig::default()).map_err(err)?.keep_mask).map_err(err)?;
    let g = random_matrix(&mut rng, 8, 8);
    let off = SrsteConfig { lambda_w: 0.0, ..SrsteConfig::default() };
    let mut ste = w.clone();
    ste.axpy(-0.1, &g).map_err(err)?;
    ensure(srste::srste_step(&w, &g, &km, 0.1, &off).map_err(err)? == ste, || "λ_w = 0 differs from straight-through".into())?;
    let cfg = SrsteConfig { lambda_w: 0.3, ..SrsteConfig::default() };
    let decay = srste::srste_gradient(&w, &Matrix::zeros(8, 8), &km, &cfg).map_err(err)?;
    for i in 0..64 {
        let kept = km.matrix().as_slice()[i] == 1.0;
        ensure((decay.as_slice()[i] == 0.0) == kept, || format!("decay support wrong at entry {i}"))?;
    }
    let (gamma, steps) = (0.05, 7);
    let mut cur = w.clone();
    for _ in 0..steps {
        cur = srste::srste_step(&cur, &Matrix::zeros(8, 8), &km, gamma, &cfg).map_err(err)?;
    }
    let factor = (1.0 - gamma * cfg.lambda_w).powi(steps);
    for i in 0..64 {
        let expect = if km.matrix().as_slice()[i] == 1.0 { w.as_slice()[i] } else { w.as_slice()[i] * factor };
        ensure((cur.as_slice()[i] - expect).abs() < 1e-12, || format!("entry {i}: geometric decay mismatch"))?;
    }
    Ok(())
}

/// Loss of a tiny model as a function of one parameter matrix.
fn model_loss(params: &ModelParams, index: usize, value: &Matrix, batch: &Batch) -> patprune_core::Result<(f64, Matrix)> {
    let mut p = params.clone();
    p.params[index].value = value.clone();
    let mut g = model::forward_graph(&p, None, batch, &AttentionPruneConfig::default())?;
    let loss = g.tape.cross_entropy(g.logits, &batch.labels)?;
    let value = g.tape.value(loss)[(0, 0)];
    let var = g.param_vars[index];
    let mut grads = g.tape.backward(loss)?;
    Ok((value, grads.take(var).expect("parameter gradient")))
}

fn model_gradient_check(_: &Ctx) -> Result<(), String> {
    let cfg = EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 10, max_seq_len: 4, n_classes: 3 };
    let params = ModelParams::init(cfg, 22).map_err(err)?;
    let examples = [
        data::Example { tokens: vec![2, 5, 7, 3], label: 0 },
        data::Example { tokens: vec![9, 4], label: 2 },
        data::Example { tokens: vec![1, 1, 8], label: 1 },
    ];
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>(), 1);
    // The key bias shifts every score of a query row equally, so softmax cancels it and its
    // exact gradient is zero. At a small step the central difference of that zero is pure
    // round-off, which the 1e-8 floor of the relative error amplifies, so it gets a wide
    // step and a direct check that the gradient vanishes.
    for index in 0..params.params.len() {
        let at = params.params[index].value.clone();
        let step = if params.params[index].name.ends_with(".bk") { 1e-2 } else { 1e-5 };
        let rel = grad_check(|v| model_loss(&params, index, v, &batch), &at, step).map_err(err)?;
        ensure(rel < 1e-4, || format!("{}: rel. err {rel:e}", params.params[index].name))?;
    }
    let bk = params.params.iter().position(|p| p.name == "layer0.bk").ok_or("no layer0.bk")?;
    let (_, g) = model_loss(&params, bk, &params.params[bk].value, &batch).map_err(err)?;
    ensure(g.max_abs() < 1e-12, || format!("key-bias gradient {:e} should vanish", g.max_abs()))?;
    Ok(())
}

fn attention_normalization(_: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let ap = AttentionPruneConfig { enabled: true, ..AttentionPruneConfig::default() };
    for t in 0..50 {
        let scores = Matrix::from_vec(16, 16, (0..256).map(|_| rng.gen_range(-4.0..4.0)).collect()).map_err(err)?;
        let keep = model::attention_keep_mask(&scores, &ap).map_err(err)?;
        let probs = autodiff::softmax_rows_value(&model::attention_prune_scores(&scores, &ap).map_err(err)?);
        for r in 0..16 {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            ensure((sum - 1.0).abs() < 1e-12, || format!("map {t} row {r} sums to {sum}"))?;
            let pruned: f64 = (0..16).filter(|&c| !keep[r * 16 + c]).map(|c| row[c]).sum();
            ensure(pruned < 1e-30, || format!("map {t} row {r}: pruned mass {pruned:e}"))?;
        }
    }
    // The tape's softmax agrees with the value-level helper.
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::from_rows(&[[0.5, -1.0, 2.0]]));
    let s = tape.softmax_rows(x).map_err(err)?;
    let direct = autodiff::softmax_rows_value(tape.value(x));
    ensure(tape.value(s) == &direct, || "tape softmax differs from value softmax".into())
}

fn data_bounds_and_padding(_: &Ctx) -> Result<(), String> {
    let spec = SyntheticSpec { n_train: 200, n_test: 50, ..SyntheticSpec::default() };
    let (train, test) = data::gen_synthetic(&spec).map_err(err)?;
    train.validate().map_err(err)?;
    test.validate().map_err(err)?;
    let cfg = EncoderConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 32, max_seq_len: 16, n_classes: 2 };
    let params = ModelParams::init(cfg, 24).map_err(err)?;
    let ap = AttentionPruneConfig::default();
    let short = data::Example { tokens: vec![4, 9, 2, 3, 7], label: 1 };
    let alone = model::forward(&params, None, &Batch::from_examples(&[&short], 1), &ap).map_err(err)?;
    let padded = model::forward(&params, None, &Batch::from_examples(&[&short], 16), &ap).map_err(err)?;
    let diff = alone.sub(&padded).map_err(err)?.max_abs();
    ensure(diff < 1e-12, || format!("padding changed logits by {diff:e}"))
}

fn hard_prune_presets(_: &Ctx) -> Result<(), String> {
    for (name, cfg) in sparsity_presets() {
        let mut params = ModelParams::init(EncoderConfig::default(), 25).map_err(err)?;
        let masks = trainer::hard_prune(&mut params, &cfg).map_err(err)?;
        for (id, ok) in trainer::feasibility_audit(&params, &masks, &cfg).map_err(err)? {
            ensure(ok, || format!("{name}: {id} infeasible after hard prune"))?;
        }
        let expected = 1.0 - cfg.keep_k as f64 / cfg.block_area() as f64;
        let got = trainer::mask_sparsity(&masks);
        ensure(got == expected, || format!("{name}: mask sparsity {got} != {expected}"))?;
    }
    Ok(())
}
