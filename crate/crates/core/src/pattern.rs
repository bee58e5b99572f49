//! Semi-structured pattern pruning.
//!
//! A matrix is tiled into non-overlapping blocks. Each block is first reduced to its
//! own top-k magnitude mask; the most frequent masks form the matrix's pattern pool,
//! and every block is then pruned with its best-matching pool mask. All tie-breaks are
//! fixed so that masks and pools are bit-for-bit reproducible:
//!
//! * magnitude ties keep the smaller row-major index,
//! * frequency ties prefer the smaller canonical key,
//! * match ties pick the smaller pool index.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest supported block area; masks are stored as 128-bit keys.
pub const MAX_BLOCK_AREA: usize = 128;

/// How a block's mask is chosen during pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ProjectionMode {
    /// Blocks must use a mask from the matrix's pattern pool.
    PoolConstrained,
    /// Every block keeps its own top-k entries (exact per-block projection).
    TopKOnly,
}

/// Block shape, per-block cardinality and pool size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SparsityConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    pub keep_k: usize,
    pub pool_size: usize,
    pub mode: ProjectionMode,
}

impl Default for SparsityConfig {
    /// 4×4 blocks, 50% kept, 32 patterns.
    fn default() -> Self {
        Self { block_rows: 4, block_cols: 4, keep_k: 8, pool_size: 32, mode: ProjectionMode::PoolConstrained }
    }
}

impl SparsityConfig {
    /// Square `p × p` blocks.
    pub fn square(p: usize, keep_k: usize, pool_size: usize, mode: ProjectionMode) -> Result<Self> {
        let cfg = Self { block_rows: p, block_cols: p, keep_k, pool_size, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn block_area(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Fraction of entries kept in every block.
    pub fn density(&self) -> f64 {
        self.keep_k as f64 / self.block_area() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::Config("block edge lengths must be positive".into()));
        }
        if self.block_area() > MAX_BLOCK_AREA {
            return Err(Error::Config(format!(
                "block area {} exceeds the supported maximum of {MAX_BLOCK_AREA}",
                self.block_area()
            )));
        }
        if self.keep_k == 0 || self.keep_k > self.block_area() {
            return Err(Error::Config(format!(
                "keep_k must lie in [1, {}], got {}",
                self.block_area(),
                self.keep_k
            )));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        Ok(())
    }
}

/// N:M pruning expressed as pattern pruning: `1 × n` blocks keeping `m` entries.
pub fn nm_config(n: usize, m: usize) -> Result<SparsityConfig> {
    if m > n {
        return Err(Error::Config(format!("N:M pruning needs M <= N, got N={n}, M={m}")));
    }
    let cfg = SparsityConfig { block_rows: 1, block_cols: n, keep_k: m, pool_size: 1, mode: ProjectionMode::TopKOnly };
    cfg.validate()?;
    Ok(cfg)
}

/// A block-shaped binary mask. The canonical key reads the bits row-major with the
/// first entry as the most significant bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatternMask {
    rows: usize,
    cols: usize,
    key: u128,
}

impl PatternMask {
    pub fn from_indices(rows: usize, cols: usize, kept: &[usize]) -> Self {
        let area = rows * cols;
        assert!(area <= MAX_BLOCK_AREA);
        let mut key = 0u128;
        for &i in kept {
            assert!(i < area, "mask index out of range");
            key |= 1u128 << (area - 1 - i);
        }
        Self { rows, cols, key }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), rows * cols);
        let kept: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        Self::from_indices(rows, cols, &kept)
    }

    pub fn key(&self) -> u128 {
        self.key
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    /// Whether row-major entry `i` is kept.
    #[inline]
    pub fn is_kept(&self, i: usize) -> bool {
        (self.key >> (self.area() - 1 - i)) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.key.count_ones() as usize
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.area()).map(|i| self.is_kept(i)).collect()
    }

    /// The mask as a 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        let data = (0..self.area()).map(|i| if self.is_kept(i) { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask dims are positive")
    }

    /// Sum of squared block entries kept by this mask.
    pub fn kept_energy(&self, block: &[f64]) -> f64 {
        block.iter().enumerate().filter(|(i, _)| self.is_kept(*i)).map(|(_, v)| v * v).sum()
    }

    /// True when every nonzero entry of `block` lies inside the mask.
    pub fn covers_support(&self, block: &[f64]) -> bool {
        block.iter().enumerate().all(|(i, v)| *v == 0.0 || self.is_kept(i))
    }
}

/// The admissible masks of one matrix, most frequent first.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatternPool {
    pub masks: Vec<PatternMask>,
    pub source: String,
}

impl PatternPool {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Tiling of a matrix into equal blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub rows_in_blocks: usize,
    pub cols_in_blocks: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl BlockGrid {
    pub fn block_count(&self) -> usize {
        self.rows_in_blocks * self.cols_in_blocks
    }

    /// Top-left matrix coordinate of block `(i, j)`.
    pub fn origin(&self, i: usize, j: usize) -> (usize, usize) {
        (i * self.block_rows, j * self.block_cols)
    }

    /// Copies block `(i, j)` out of `m` in row-major order into `buf`.
    pub fn read_block(&self, m: &Matrix, i: usize, j: usize, buf: &mut Vec<f64>) {
        buf.clear();
        let (r0, c0) = self.origin(i, j);
        for r in r0..r0 + self.block_rows {
            buf.extend_from_slice(&m.row(r)[c0..c0 + self.block_cols]);
        }
    }

    /// Iterates over all block coordinates in row-major block order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows_in_blocks).flat_map(move |i| (0..self.cols_in_blocks).map(move |j| (i, j)))
    }
}

/// Partitions `m` into `p × p` blocks.
pub fn partition(m: &Matrix, p: usize) -> Result<BlockGrid> {
    partition_rect(m, p, p)
}

/// Partitions `m` into `block_rows × block_cols` blocks; dimensions must divide exactly.
pub fn partition_rect(m: &Matrix, block_rows: usize, block_cols: usize) -> Result<BlockGrid> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::Config("block edge lengths must be positive".into()));
    }
    if !m.rows().is_multiple_of(block_rows) {
        return Err(Error::Config(format!(
            "rows = {} is not divisible by block height {block_rows}",
            m.rows()
        )));
    }
    if !m.cols().is_multiple_of(block_cols) {
        return Err(Error::Config(format!(
            "cols = {} is not divisible by block width {block_cols}",
            m.cols()
        )));
    }
    Ok(BlockGrid {
        rows_in_blocks: m.rows() / block_rows,
        cols_in_blocks: m.cols() / block_cols,
        block_rows,
        block_cols,
    })
}

fn grid_for(m: &Matrix, cfg: &SparsityConfig) -> Result<BlockGrid> {
    cfg.validate()?;
    partition_rect(m, cfg.block_rows, cfg.block_cols)
}

/// Indices of the `k` largest `score`s; ties keep the smaller index.
pub(crate) fn topk_indices(values: &[f64], k: usize, score: impl Fn(f64) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        score(values[b]).partial_cmp(&score(values[a])).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Top-`keep_k` magnitude mask of a single row-major block.
pub fn topk_mask_of(block: &[f64], rows: usize, cols: usize, keep_k: usize) -> Result<PatternMask> {
    if block.len() != rows * cols {
        return Err(Error::dim("block_topk_mask", (rows, cols), (block.len(), 1)));
    }
    if keep_k == 0 || keep_k > block.len() {
        return Err(Error::Config(format!("keep_k must lie in [1, {}], got {keep_k}", block.len())));
    }
    Ok(PatternMask::from_indices(rows, cols, &topk_indices(block, keep_k, f64::abs)))
}

/// Mask keeping the `keep_k` largest-magnitude entries of `block`.
pub fn block_topk_mask(block: &Matrix, keep_k: usize) -> Result<PatternMask> {
    topk_mask_of(block.as_slice(), block.rows(), block.cols(), keep_k)
}

/// Builds the pool of the `pool_size` most frequent per-block top-k masks of `m`.
pub fn build_pattern_pool(m: &Matrix, cfg: &SparsityConfig) -> Result<PatternPool> {
    let grid = grid_for(m, cfg)?;
    let mut counts: BTreeMap<PatternMask, usize> = BTreeMap::new();
    let mut buf = Vec::with_capacity(cfg.block_area());
    for (i, j) in grid.blocks() {
        grid.read_block(m, i, j, &mut buf);
        let mask = topk_mask_of(&buf, cfg.block_rows, cfg.block_cols, cfg.keep_k)?;
        *counts.entry(mask).or_insert(0) += 1;
    }
    let mut ranked: Vec<(PatternMask, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.key().cmp(&b.0.key())));
    ranked.truncate(cfg.pool_size);
    Ok(PatternPool {
        masks: ranked.into_iter().map(|(mask, _)| mask).collect(),
        source: format!("{}x{} matrix", m.rows(), m.cols()),
    })
}

fn match_slice(block: &[f64], pool: &PatternPool) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::State("cannot match against an empty pattern pool".into()));
    }
    let mut best = 0;
    let mut best_energy = f64::NEG_INFINITY;
    for (i, mask) in pool.masks.iter().enumerate() {
        if mask.area() != block.len() {
            return Err(Error::dim("match_block_to_pool", mask.shape(), (block.len(), 1)));
        }
        let e = mask.kept_energy(block);
        if e > best_energy {
            best_energy = e;
            best = i;
        }
    }
    Ok(best)
}

/// Index of the pool mask that keeps the most energy of `block` (equivalently, the
/// smallest Frobenius reconstruction error). Ties go to the smaller index.
pub fn match_block_to_pool(block: &Matrix, pool: &PatternPool) -> Result<usize> {
    if let Some(mask) = pool.masks.first() {
        if mask.shape() != block.shape() {
            return Err(Error::dim("match_block_to_pool", mask.shape(), block.shape()));
        }
    }
    match_slice(block.as_slice(), pool)
}

/// Result of pruning a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    pub pruned: Matrix,
    /// 0/1 matrix of kept entries.
    pub keep_mask: Matrix,
    /// The pool used, under [`ProjectionMode::PoolConstrained`].
    pub pool: Option<PatternPool>,
}

/// Prunes every block of `m` to exactly `keep_k` kept entries.
pub fn pattern_prune(m: &Matrix, cfg: &SparsityConfig) -> Result<Pruned> {
    match cfg.mode {
        ProjectionMode::TopKOnly => prune_with(m, cfg, None),
        ProjectionMode::PoolConstrained => {
            let pool = build_pattern_pool(m, cfg)?;
            prune_with(m, cfg, Some(pool))
        }
    }
}

/// Prunes `m` against a fixed, previously built pool.
pub fn pattern_prune_with_pool(m: &Matrix, cfg: &SparsityConfig, pool: &PatternPool) -> Result<Pruned> {
    if let Some(mask) = pool.masks.first() {
        if mask.shape() != (cfg.block_rows, cfg.block_cols) || mask.count_ones() != cfg.keep_k {
            return Err(Error::Config("pool masks do not match the sparsity configuration".into()));
        }
    }
    prune_with(m, cfg, Some(pool.clone()))
}

fn prune_with(m: &Matrix, cfg: &SparsityConfig, pool: Option<PatternPool>) -> Result<Pruned> {
    let grid = grid_for(m, cfg)?;
    let mut keep_mask = Matrix::zeros(m.rows(), m.cols());
    let mut pruned = Matrix::zeros(m.rows(), m.cols());
    let mut buf = Vec::with_capacity(cfg.block_area());
    for (i, j) in grid.blocks() {
        grid.read_block(m, i, j, &mut buf);
        let mask = match &pool {
            Some(pool) => pool.masks[match_slice(&buf, pool)?],
            None => topk_mask_of(&buf, cfg.block_rows, cfg.block_cols, cfg.keep_k)?,
        };
        let (r0, c0) = grid.origin(i, j);
        for (idx, v) in buf.iter().enumerate() {
            if mask.is_kept(idx) {
                let (r, c) = (r0 + idx / cfg.block_cols, c0 + idx % cfg.block_cols);
                keep_mask[(r, c)] = 1.0;
                pruned[(r, c)] = *v;
            }
        }
    }
    Ok(Pruned { pruned, keep_mask, pool })
}

/// Membership test for the sparse set: every block has at most `keep_k` nonzeros and,
/// under [`ProjectionMode::PoolConstrained`], its support lies inside some mask of the
/// pool built from `w` itself.
pub fn is_feasible(w: &Matrix, cfg: &SparsityConfig) -> Result<bool> {
    match cfg.mode {
        ProjectionMode::TopKOnly => block_counts_ok(w, cfg),
        ProjectionMode::PoolConstrained => {
            let pool = build_pattern_pool(w, cfg)?;
            is_feasible_in_pool(w, cfg, &pool)
        }
    }
}

/// Like [`is_feasible`] but against an explicit pool.
pub fn is_feasible_in_pool(w: &Matrix, cfg: &SparsityConfig, pool: &PatternPool) -> Result<bool> {
    if !block_counts_ok(w, cfg)? {
        return Ok(false);
    }
    let grid = grid_for(w, cfg)?;
    let mut buf = Vec::with_capacity(cfg.block_area());
    for (i, j) in grid.blocks() {
        grid.read_block(w, i, j, &mut buf);
        if !pool.masks.iter().any(|m| m.covers_support(&buf)) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn block_counts_ok(w: &Matrix, cfg: &SparsityConfig) -> Result<bool> {
    let grid = grid_for(w, cfg)?;
    let mut buf = Vec::with_capacity(cfg.block_area());
    for (i, j) in grid.blocks() {
        grid.read_block(w, i, j, &mut buf);
        if buf.iter().filter(|v| **v != 0.0).count() > cfg.keep_k {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Number of ones in every block of a 0/1 mask, in block order.
pub fn block_popcounts(mask: &Matrix, block_rows: usize, block_cols: usize) -> Result<Vec<usize>> {
    let grid = partition_rect(mask, block_rows, block_cols)?;
    let mut buf = Vec::new();
    Ok(grid
        .blocks()
        .map(|(i, j)| {
            grid.read_block(mask, i, j, &mut buf);
            buf.iter().filter(|v| **v != 0.0).count()
        })
        .collect())
}
