//! Datasets: seeded synthetic classification tasks, whitespace tokenization and batching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Additive score given to padded key positions.
pub const PAD_SENTINEL: f64 = -1e9;

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    tokens: Vec<String>,
    #[cfg_attr(feature = "serde", serde(skip))]
    index: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Builds a vocabulary from the given content tokens (duplicates and reserved names ignored).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab { tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()], index: BTreeMap::new() };
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub n_classes: usize,
    pub max_seq_len: usize,
    /// Original label strings, indexed by class id.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks id, label and length bounds of every example.
    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.is_empty() || ex.tokens.len() > self.max_seq_len {
                return Err(Error::Input(format!(
                    "example {i} has length {} outside [1, {}]",
                    ex.tokens.len(),
                    self.max_seq_len
                )));
            }
            if let Some(t) = ex.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(Error::Input(format!("example {i} has token id {t} >= vocab size {}", self.vocab.len())));
            }
            if ex.label >= self.n_classes {
                return Err(Error::Input(format!("example {i} has label {} >= {} classes", ex.label, self.n_classes)));
            }
        }
        Ok(())
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }
}

/// Synthetic labeling rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TaskKind {
    /// Label 1 iff token `t2` is immediately followed by `t3` somewhere.
    ContainsBigram,
    /// Label 1 iff `t2` occurs more often than `t3` (never tied).
    MajorityToken,
    /// Label = number of `t2` occurrences mod 2.
    ParityOfMarker,
}

/// First designated content token id.
pub const MARK_A: usize = 2;
/// Second designated content token id.
pub const MARK_B: usize = 3;

impl TaskKind {
    /// Label of a token sequence under this rule.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        match self {
            TaskKind::ContainsBigram => tokens.windows(2).any(|w| w[0] == MARK_A && w[1] == MARK_B) as usize,
            TaskKind::MajorityToken => {
                let a = tokens.iter().filter(|&&t| t == MARK_A).count();
                let b = tokens.iter().filter(|&&t| t == MARK_B).count();
                (a > b) as usize
            }
            TaskKind::ParityOfMarker => tokens.iter().filter(|&&t| t == MARK_A).count() % 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { task: TaskKind::ContainsBigram, vocab_size: 32, seq_len: 16, n_train: 4000, n_test: 1000, seed: 0 }
    }
}

fn synthetic_vocab(size: usize) -> Vocab {
    Vocab::from_tokens((2..size).map(|i| format!("t{i}")))
}

fn sample_sequence(task: TaskKind, label: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = spec.seq_len;
    let content = 2..spec.vocab_size;
    match task {
        TaskKind::ContainsBigram => {
            // Markov sampling that never emits MARK_B right after MARK_A.
            let mut seq: Vec<usize> = Vec::with_capacity(len);
            for _ in 0..len {
                let t = loop {
                    let t = rng.gen_range(content.clone());
                    if !(seq.last() == Some(&MARK_A) && t == MARK_B) {
                        break t;
                    }
                };
                seq.push(t);
            }
            if label == 1 {
                let i = rng.gen_range(0..len - 1);
                seq[i] = MARK_A;
                seq[i + 1] = MARK_B;
            }
            seq
        }
        TaskKind::MajorityToken => {
            let others = spec.vocab_size > 4;
            let total = if others { rng.gen_range(1..=len) } else { len };
            let more = rng.gen_range(total / 2 + 1..=total);
            let (ca, cb) = if label == 1 { (more, total - more) } else { (total - more, more) };
            let mut seq: Vec<usize> = (0..len)
                .map(|i| {
                    if i < ca {
                        MARK_A
                    } else if i < ca + cb {
                        MARK_B
                    } else {
                        rng.gen_range(4..spec.vocab_size)
                    }
                })
                .collect();
            seq.shuffle(rng);
            seq
        }
        TaskKind::ParityOfMarker => {
            let count = loop {
                let c = rng.gen_range(0..=len);
                if c % 2 == label {
                    break c;
                }
            };
            let mut seq: Vec<usize> =
                (0..len).map(|i| if i < count { MARK_A } else { rng.gen_range(3..spec.vocab_size) }).collect();
            seq.shuffle(rng);
            seq
        }
    }
}

fn balanced_split(
    spec: &SyntheticSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
    exclude: &BTreeSet<Vec<usize>>,
) -> Vec<Example> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|label| {
            let tokens = loop {
                let s = sample_sequence(spec.task, label, spec, rng);
                if !exclude.contains(&s) {
                    break s;
                }
            };
            debug_assert_eq!(spec.task.label_of(&tokens), label);
            Example { tokens, label }
        })
        .collect()
}

/// Generates a balanced train/test pair; test sequences never occur in train.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.vocab_size < 4 {
        return Err(Error::Config(format!("vocab_size must be at least 4, got {}", spec.vocab_size)));
    }
    let min_len = match spec.task {
        TaskKind::ContainsBigram => 2,
        TaskKind::MajorityToken | TaskKind::ParityOfMarker => 1,
    };
    if spec.seq_len < min_len {
        return Err(Error::Config(format!("seq_len {} is too short for {:?}", spec.seq_len, spec.task)));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Config("n_train and n_test must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = balanced_split(spec, spec.n_train, &mut rng, &BTreeSet::new());
    let seen: BTreeSet<Vec<usize>> = train.iter().map(|e| e.tokens.clone()).collect();
    let test = balanced_split(spec, spec.n_test, &mut rng, &seen);
    let vocab = synthetic_vocab(spec.vocab_size);
    let make = |examples| Dataset {
        examples,
        vocab: vocab.clone(),
        n_classes: 2,
        max_seq_len: spec.seq_len,
        label_names: vec!["0".to_string(), "1".to_string()],
    };
    Ok((make(train), make(test)))
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// A labeled raw text row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRow {
    pub text: String,
    pub label: String,
    /// Source line, for diagnostics.
    pub line: usize,
}

fn sorted_labels(rows: &[TextRow]) -> Vec<String> {
    let set: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let mut labels: Vec<String> = set.into_iter().map(String::from).collect();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap_or(0));
    }
    labels
}

/// Builds train/test datasets from text rows. The vocabulary and the label set come
/// from the training rows; unseen test tokens map to `<unk>` and unseen test labels
/// are rejected.
pub fn datasets_from_text(train: &[TextRow], test: &[TextRow], max_seq_len: usize) -> Result<(Dataset, Dataset)> {
    if max_seq_len == 0 {
        return Err(Error::Config("max_seq_len must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("training data has no rows".into()));
    }
    let mut vocab = Vocab::default();
    for row in train {
        for t in tokenize(&row.text) {
            vocab.insert(t);
        }
    }
    let label_names = sorted_labels(train);
    let label_ids: BTreeMap<&str, usize> = label_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let encode = |rows: &[TextRow]| -> Result<Vec<Example>> {
        rows.iter()
            .map(|row| {
                let label = *label_ids.get(row.label.as_str()).ok_or_else(|| {
                    Error::Input(format!("line {}: unknown label {:?}", row.line, row.label))
                })?;
                let mut tokens: Vec<usize> = tokenize(&row.text).iter().map(|t| vocab.id(t)).collect();
                if tokens.is_empty() {
                    tokens.push(UNK);
                }
                tokens.truncate(max_seq_len);
                Ok(Example { tokens, label })
            })
            .collect()
    };
    let train_ex = encode(train)?;
    let test_ex = encode(test)?;
    let make = |examples| Dataset {
        examples,
        vocab: vocab.clone(),
        n_classes: label_names.len().max(2),
        max_seq_len,
        label_names: label_names.clone(),
    };
    Ok((make(train_ex), make(test_ex)))
}

/// A padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch × seq_len` token ids, row-major, padded with [`PAD`].
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], pad_multiple: usize) -> Self {
        let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(1).max(1);
        let m = pad_multiple.max(1);
        let seq_len = longest.div_ceil(m) * m;
        let mut tokens = vec![PAD; examples.len() * seq_len];
        for (b, e) in examples.iter().enumerate() {
            tokens[b * seq_len..b * seq_len + e.tokens.len()].copy_from_slice(&e.tokens);
        }
        Batch {
            tokens,
            lengths: examples.iter().map(|e| e.tokens.len()).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            seq_len,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// `1 × seq_len` additive key mask for example `b`, or `None` when it has no padding.
    pub fn key_mask(&self, b: usize) -> Option<Matrix> {
        let len = self.lengths[b];
        if len == self.seq_len {
            return None;
        }
        let data = (0..self.seq_len).map(|i| if i < len { 0.0 } else { PAD_SENTINEL }).collect();
        Some(Matrix::from_vec(1, self.seq_len, data).expect("seq_len > 0"))
    }
}

/// Iterator over padded batches of a dataset.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    pad_multiple: usize,
}

impl<'a> Batches<'a> {
    /// Pads every batch to a multiple of `m` positions (needed when attention maps are pruned
    /// in `m × m` blocks).
    pub fn pad_multiple(mut self, m: usize) -> Self {
        self.pad_multiple = m.max(1);
        self
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let examples: Vec<&Example> = self.order[self.pos..end].iter().map(|&i| &self.data.examples[i]).collect();
        self.pos = end;
        Some(Batch::from_examples(&examples, self.pad_multiple))
    }
}

/// Splits `d` into batches of `batch_size` (the last may be smaller), optionally shuffled
/// with a seeded permutation.
pub fn batches(d: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { data: d, order, batch_size, pos: 0, pad_multiple: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(task: TaskKind) -> SyntheticSpec {
        SyntheticSpec { task, vocab_size: 12, seq_len: 8, n_train: 101, n_test: 40, seed: 7 }
    }

    #[test]
    fn synthetic_is_deterministic_balanced_and_disjoint() {
        for task in [TaskKind::ContainsBigram, TaskKind::MajorityToken, TaskKind::ParityOfMarker] {
            let spec = small_spec(task);
            let (train, test) = gen_synthetic(&spec).unwrap();
            assert_eq!((train.clone(), test.clone()), gen_synthetic(&spec).unwrap());
            for d in [&train, &test] {
                d.validate().unwrap();
                let c = d.class_counts();
                assert!(c[0].abs_diff(c[1]) <= 1, "{task:?} {c:?}");
                for ex in &d.examples {
                    assert_eq!(task.label_of(&ex.tokens), ex.label);
                }
            }
            let seen: BTreeSet<_> = train.examples.iter().map(|e| &e.tokens).collect();
            assert!(test.examples.iter().all(|e| !seen.contains(&e.tokens)));
        }
    }

    #[test]
    fn synthetic_rejects_infeasible_specs() {
        let mut spec = small_spec(TaskKind::ContainsBigram);
        spec.seq_len = 1;
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
        spec.seq_len = 8;
        spec.vocab_size = 3;
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_vocab_still_works() {
        for task in [TaskKind::ContainsBigram, TaskKind::MajorityToken, TaskKind::ParityOfMarker] {
            let spec = SyntheticSpec { task, vocab_size: 4, seq_len: 5, n_train: 10, n_test: 4, seed: 1 };
            let (train, _) = gen_synthetic(&spec).unwrap();
            assert!(train.examples.iter().all(|e| task.label_of(&e.tokens) == e.label));
        }
    }

    fn rows(items: &[(&str, &str)]) -> Vec<TextRow> {
        items
            .iter()
            .enumerate()
            .map(|(i, (t, l))| TextRow { text: t.to_string(), label: l.to_string(), line: i + 2 })
            .collect()
    }

    #[test]
    fn text_vocab_and_unk() {
        let train = rows(&[("Good movie", "1"), ("bad  film", "0")]);
        let test = rows(&[("good popcorn", "1")]);
        let (tr, te) = datasets_from_text(&train, &test, 16).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.n_classes, 2);
        assert_eq!(tr.label_names, vec!["0", "1"]);
        assert_eq!(te.examples[0].tokens[1], UNK);
        assert_eq!(te.examples[0].tokens[0], tr.vocab.id("good"));

        let bad = rows(&[("x", "2")]);
        assert!(matches!(datasets_from_text(&train, &bad, 16), Err(Error::Input(msg)) if msg.contains("line 2")));
    }

    #[test]
    fn batching_sizes_order_and_padding() {
        let spec = SyntheticSpec { n_train: 10, ..small_spec(TaskKind::ParityOfMarker) };
        let (train, _) = gen_synthetic(&spec).unwrap();
        let sizes: Vec<usize> = batches(&train, 4, 0, true).unwrap().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let first: Vec<usize> = batches(&train, 4, 0, false).unwrap().next().unwrap().labels;
        assert_eq!(first, train.examples[..4].iter().map(|e| e.label).collect::<Vec<_>>());
        let a: Vec<Batch> = batches(&train, 3, 9, true).unwrap().collect();
        let b: Vec<Batch> = batches(&train, 3, 9, true).unwrap().collect();
        assert_eq!(a, b);
        assert!(batches(&train, 0, 0, false).is_err());

        let e1 = Example { tokens: vec![5, 6, 7], label: 0 };
        let e2 = Example { tokens: vec![5], label: 1 };
        let batch = Batch::from_examples(&[&e1, &e2], 4);
        assert_eq!(batch.seq_len, 4);
        assert_eq!(batch.sequence(1), &[5, PAD, PAD, PAD]);
        assert_eq!(batch.key_mask(1).unwrap().as_slice(), &[0.0, PAD_SENTINEL, PAD_SENTINEL, PAD_SENTINEL]);
    }
}
