//! Weight-distribution analysis: whole-matrix and per-section histograms and the
//! per-block near-zero fraction.

use std::fmt::Write as _;

use patprune_core::pattern::SparsityConfig;
use patprune_core::Matrix;
use serde::Serialize;

pub const TABLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges, uniform over `[-range, range]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform histogram of `values` over `[-range, range]`; values on the upper edge
    /// land in the last bin. A zero range puts every value in the middle bin.
    pub fn build(values: impl IntoIterator<Item = f64>, range: f64, bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        let edges = (0..=bins).map(|i| -range + 2.0 * range * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let idx = if range > 0.0 { ((v + range) / (2.0 * range) * bins as f64).floor() } else { (bins / 2) as f64 };
            counts[(idx.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SectionHistogram {
    pub row: usize,
    pub col: usize,
    /// Half-open row and column ranges covered by the section.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSparsity {
    pub epsilon: f64,
    pub block_rows: usize,
    pub block_cols: usize,
    pub n_blocks: usize,
    /// Mean over blocks of the fraction of entries with `|w| < epsilon`.
    pub mean: f64,
    /// Population standard deviation of the same per-block fractions.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramReport {
    pub target: String,
    pub rows: usize,
    pub cols: usize,
    pub range: f64,
    pub whole: Histogram,
    pub sections: usize,
    pub section_histograms: Vec<SectionHistogram>,
    pub block_sparsity: BlockSparsity,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{what} = {size} cannot be split into {sections} sections")]
    Sections { what: &'static str, size: usize, sections: usize },
    #[error("a {rows}x{cols} matrix does not tile into {br}x{bc} blocks")]
    Blocks { rows: usize, cols: usize, br: usize, bc: usize },
    #[error("bins and sections must be positive")]
    Empty,
}

/// Per-block fraction of entries with magnitude below `epsilon`.
pub fn block_near_zero(w: &Matrix, br: usize, bc: usize, epsilon: f64) -> Result<Vec<f64>, AnalysisError> {
    if br == 0 || bc == 0 || !w.rows().is_multiple_of(br) || !w.cols().is_multiple_of(bc) {
        return Err(AnalysisError::Blocks { rows: w.rows(), cols: w.cols(), br, bc });
    }
    let mut out = Vec::with_capacity(w.len() / (br * bc));
    for bi in 0..w.rows() / br {
        for bj in 0..w.cols() / bc {
            let mut near = 0usize;
            for i in 0..br {
                for j in 0..bc {
                    if w[(bi * br + i, bj * bc + j)].abs() < epsilon {
                        near += 1;
                    }
                }
            }
            out.push(near as f64 / (br * bc) as f64);
        }
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn analyze(
    target: &str,
    w: &Matrix,
    sections: usize,
    bins: usize,
    epsilon: f64,
    blocks: &SparsityConfig,
) -> Result<HistogramReport, AnalysisError> {
    if sections == 0 || bins == 0 {
        return Err(AnalysisError::Empty);
    }
    for (what, size) in [("rows", w.rows()), ("cols", w.cols())] {
        if size < sections {
            return Err(AnalysisError::Sections { what, size, sections });
        }
    }
    let range = w.max_abs();
    let whole = Histogram::build(w.as_slice().iter().copied(), range, bins);
    // Sections differ in size by at most one row or column when the split is uneven.
    let bounds = |n: usize, s: usize| (s * n / sections, (s + 1) * n / sections);
    let mut section_histograms = Vec::with_capacity(sections * sections);
    for row in 0..sections {
        for col in 0..sections {
            let (rows, cols) = (bounds(w.rows(), row), bounds(w.cols(), col));
            let values = (rows.0..rows.1).flat_map(|i| (cols.0..cols.1).map(move |j| (i, j))).map(|idx| w[idx]);
            section_histograms.push(SectionHistogram { row, col, rows, cols, histogram: Histogram::build(values, range, bins) });
        }
    }
    let fractions = block_near_zero(w, blocks.block_rows, blocks.block_cols, epsilon)?;
    let (mean, std) = mean_std(&fractions);
    Ok(HistogramReport {
        target: target.into(),
        rows: w.rows(),
        cols: w.cols(),
        range,
        whole,
        sections,
        section_histograms,
        block_sparsity: BlockSparsity {
            epsilon,
            block_rows: blocks.block_rows,
            block_cols: blocks.block_cols,
            n_blocks: fractions.len(),
            mean,
            std,
        },
    })
}

impl HistogramReport {
    /// Tab-separated whole-matrix histogram.
    pub fn whole_table(&self) -> String {
        let mut s = format!("# patprune-histogram v{TABLE_VERSION} target={} section=whole\nlo\thi\tcount\n", self.target);
        push_rows(&mut s, &self.whole, "");
        s
    }

    /// Tab-separated per-section histograms, one block of rows per section.
    pub fn sections_table(&self) -> String {
        let mut s = format!(
            "# patprune-histogram v{TABLE_VERSION} target={} sections={}x{}\nsection_row\tsection_col\trows\tcols\tlo\thi\tcount\n",
            self.target, self.sections, self.sections
        );
        for sec in &self.section_histograms {
            let prefix = format!("{}\t{}\t{}..{}\t{}..{}\t", sec.row, sec.col, sec.rows.0, sec.rows.1, sec.cols.0, sec.cols.1);
            push_rows(&mut s, &sec.histogram, &prefix);
        }
        s
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            format: &'static str,
            version: u32,
            target: &'a str,
            rows: usize,
            cols: usize,
            range: f64,
            sections: usize,
            block_sparsity: &'a BlockSparsity,
        }
        let s = Summary {
            format: "patprune-distribution-summary",
            version: TABLE_VERSION,
            target: &self.target,
            rows: self.rows,
            cols: self.cols,
            range: self.range,
            sections: self.sections,
            block_sparsity: &self.block_sparsity,
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

fn push_rows(s: &mut String, h: &Histogram, prefix: &str) {
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{prefix}{:e}\t{:e}\t{c}", h.edges[i], h.edges[i + 1]);
    }
}
