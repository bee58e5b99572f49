//! Line-delimited JSON metrics. The first line names the format and version.

use patprune_core::trainer::{EpochMetrics, EvalResult};
use serde::Serialize;

pub const FORMAT: &str = "patprune-metrics";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum Record {
    Epoch(EpochMetrics),
    Eval {
        stage: String,
        #[serde(flatten)]
        result: EvalResult,
        /// Fraction of exact zeros in the forward weights of prunable matrices.
        prunable_sparsity: f64,
        all_feasible: bool,
    },
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    records: Vec<Record>,
}

impl MetricsLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn extend_epochs(&mut self, epochs: impl IntoIterator<Item = EpochMetrics>) {
        self.records.extend(epochs.into_iter().map(Record::Epoch));
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn render(&self) -> String {
        let mut out = serde_json::json!({ "format": FORMAT, "version": VERSION }).to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}
