//! TSV ingestion and dataset export.

use std::path::Path;

use patprune_core::data::{self, Dataset, TextRow};
use serde::Serialize;

use crate::config::{DataConfig, DataSource};

pub const EXPORT_FORMAT: &str = "patprune-dataset";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Core(#[from] patprune_core::Error),
}

/// Parses tab-separated text with a header row. The columns named `text` (or `sentence`)
/// and `label` are used; other columns are ignored. Line numbers are 1-based.
pub fn parse_tsv(text: &str, path: &str) -> Result<Vec<TextRow>, DataError> {
    let err = |line: usize, message: String| DataError::Parse { path: path.into(), line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header row".into()))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |names: &[&str]| cols.iter().position(|c| names.iter().any(|n| c.eq_ignore_ascii_case(n)));
    let text_col = find(&["text", "sentence"]).ok_or_else(|| err(1, "header has no `text` or `sentence` column".into()))?;
    let label_col = find(&["label"]).ok_or_else(|| err(1, "header has no `label` column".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(err(n, format!("expected {} tab-separated fields, found {}", cols.len(), fields.len())));
        }
        let label = fields[label_col].trim();
        if label.is_empty() {
            return Err(err(n, "empty label".into()));
        }
        rows.push(TextRow { text: fields[text_col].to_string(), label: label.to_string(), line: n });
    }
    Ok(rows)
}

fn read_tsv(path: &Path) -> Result<Vec<TextRow>, DataError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: name.clone(), source })?;
    parse_tsv(&text, &name)
}

/// Train and test sets described by the data section of a run configuration.
pub fn load_datasets(cfg: &DataConfig) -> Result<(Dataset, Dataset), DataError> {
    match cfg.source {
        DataSource::Synthetic => Ok(data::gen_synthetic(&cfg.synthetic)?),
        DataSource::Tsv => {
            let missing = |what: &str| patprune_core::Error::Config(format!("data.{what} is required for TSV data"));
            let train = read_tsv(cfg.train_path.as_deref().ok_or_else(|| missing("train_path"))?)?;
            let test = read_tsv(cfg.test_path.as_deref().ok_or_else(|| missing("test_path"))?)?;
            Ok(data::datasets_from_text(&train, &test, cfg.max_seq_len)?)
        }
    }
}

#[derive(Serialize)]
struct Export<'a> {
    format: &'static str,
    version: u32,
    train: &'a Dataset,
    test: &'a Dataset,
}

/// JSON export of both splits, vocabulary and label names.
pub fn export_json(train: &Dataset, test: &Dataset) -> String {
    let doc = Export { format: EXPORT_FORMAT, version: EXPORT_VERSION, train, test };
    serde_json::to_string(&doc).expect("datasets serialize to JSON")
}
