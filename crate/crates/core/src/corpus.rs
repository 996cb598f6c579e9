//! Unaggregated multi-annotator corpora: ingestion, aggregation (majority,
//! empirical distribution, multi-label gold), corpus statistics and worker
//! subsets.
//!
//! A corpus is immutable after ingestion; all aggregate operations are pure.

use crate::taxonomy::{normalize_label, Level, Taxonomy, TaxonomyError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use thiserror::Error;

/// Corpus split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One worker's label for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub worker_id: String,
    /// Level-2 or Level-3 label name.
    pub label: String,
    pub split: Split,
}

/// An argument pair with optional context and its annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub arg1: String,
    pub arg2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_after: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    #[serde(skip)]
    pub split: Split,
    /// `(worker_id, finest-level ordinal, level)` per annotation, in
    /// ingestion order.
    #[serde(skip)]
    pub annotations: Vec<Annotation>,
}

/// A validated annotation: the label resolved to its finest taxonomy level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub worker_id: String,
    pub level: Level,
    pub ordinal: usize,
}

/// A normalized probability vector over the label set of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub level: Level,
    pub probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(level: Level, probs: Vec<f64>) -> Result<LabelDistribution, CorpusError> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(CorpusError::InvalidDistribution(
                "negative or non-finite entry".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(LabelDistribution { level, probs })
    }

    /// Index of the largest probability; ties resolved by `priors`.
    pub fn argmax(&self, priors: &LabelPriors) -> usize {
        let max = self.probs.iter().cloned().fold(f64::MIN, f64::max);
        let candidates: Vec<usize> = (0..self.probs.len())
            .filter(|&i| self.probs[i] == max)
            .collect();
        priors.break_tie(&candidates)
    }

    /// Shannon entropy in nats.
    pub fn entropy_nats(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Corpus-wide label counts at one level, used as the deterministic
/// tie-break: more frequent label first, then lower ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPriors {
    pub level: Level,
    pub counts: Vec<u64>,
}

impl LabelPriors {
    /// Uniform priors (ordinal-only tie-break), for contexts with no corpus.
    pub fn uniform(level: Level, n_labels: usize) -> LabelPriors {
        LabelPriors {
            level,
            counts: vec![0; n_labels],
        }
    }

    /// Among candidate ordinals, pick by (higher count, then lower ordinal).
    pub fn break_tie(&self, candidates: &[usize]) -> usize {
        debug_assert!(!candidates.is_empty());
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if self.counts[c] > self.counts[best] {
                best = c;
            }
        }
        best
    }
}

/// Aggregate statistics of a corpus at a given level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub level: Level,
    pub item_count: usize,
    pub annotation_count: usize,
    pub worker_count: usize,
    pub annotations_per_worker_mean: f64,
    pub annotations_per_item_mean: f64,
    pub distinct_labels_per_item_mean: f64,
    pub agreement_rate: f64,
    pub mean_entropy_raw: f64,
    pub mean_entropy_normalized: f64,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate annotation for item {item:?} by worker {worker:?}")]
    DuplicatePair {
        line: usize,
        item: String,
        worker: String,
    },
    #[error("line {line}: item {item:?} assigned to both split {a} and split {b}")]
    SplitConflict {
        line: usize,
        item: String,
        a: Split,
        b: Split,
    },
    #[error("annotation references unknown item {0:?}")]
    UnknownItem(String),
    #[error("item {0:?} has no annotations")]
    EmptyItem(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("need at least 2 workers in the train split, found {0}")]
    TooFewWorkers(usize),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Items with per-worker label records, grouped by item and split.
#[derive(Debug, Clone)]
pub struct Corpus {
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Group validated records by item. Each record carries its split; all
    /// records of one item must agree on it. Duplicate (item, worker) pairs
    /// are rejected.
    pub fn ingest_annotations(
        items: Vec<Item>,
        records: impl IntoIterator<Item = AnnotationRecord>,
        taxonomy: &Taxonomy,
    ) -> Result<Corpus, CorpusError> {
        let mut corpus_items = items;
        let mut index = HashMap::new();
        for (i, item) in corpus_items.iter_mut().enumerate() {
            item.annotations.clear();
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(CorpusError::Malformed {
                    line: 0,
                    message: format!("duplicate item id {:?}", item.item_id),
                });
            }
        }

        let mut seen_pairs: BTreeSet<(usize, String)> = BTreeSet::new();
        let mut split_set: Vec<Option<Split>> = vec![None; corpus_items.len()];
        for (line0, rec) in records.into_iter().enumerate() {
            let line = line0 + 1;
            if rec.worker_id.is_empty() {
                return Err(CorpusError::Malformed {
                    line,
                    message: "empty worker id".into(),
                });
            }
            let idx = *index
                .get(&rec.item_id)
                .ok_or_else(|| CorpusError::UnknownItem(rec.item_id.clone()))?;
            let label = normalize_label(&rec.label);
            let (level, ordinal) = taxonomy
                .resolve(&label)
                .map_err(|_| CorpusError::UnknownLabel {
                    line,
                    label: rec.label.clone(),
                })?;
            if level == Level::One {
                return Err(CorpusError::UnknownLabel {
                    line,
                    label: format!("{} (Level-1 labels cannot be annotations)", rec.label),
                });
            }
            if !seen_pairs.insert((idx, rec.worker_id.clone())) {
                return Err(CorpusError::DuplicatePair {
                    line,
                    item: rec.item_id.clone(),
                    worker: rec.worker_id.clone(),
                });
            }
            match split_set[idx] {
                None => split_set[idx] = Some(rec.split),
                Some(s) if s != rec.split => {
                    return Err(CorpusError::SplitConflict {
                        line,
                        item: rec.item_id.clone(),
                        a: s,
                        b: rec.split,
                    })
                }
                _ => {}
            }
            corpus_items[idx].annotations.push(Annotation {
                worker_id: rec.worker_id,
                level,
                ordinal,
            });
        }

        for (i, item) in corpus_items.iter_mut().enumerate() {
            if item.annotations.is_empty() {
                return Err(CorpusError::EmptyItem(item.item_id.clone()));
            }
            item.split = split_set[i].expect("split recorded with first annotation");
        }

        Ok(Corpus {
            items: corpus_items,
            index,
        })
    }

    /// Parse items (JSON lines) and annotations (tab-separated
    /// `item_id  worker_id  label  split`) from readers. Lines starting
    /// with `#` are comments.
    pub fn ingest_readers(
        items_reader: impl BufRead,
        annotations_reader: impl BufRead,
        taxonomy: &Taxonomy,
    ) -> Result<Corpus, CorpusError> {
        let items = read_items(items_reader)?;
        let records = read_annotation_records(annotations_reader)?;
        Corpus::ingest_annotations(items, records, taxonomy)
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).sum()
    }

    /// Distinct worker ids across all splits, sorted.
    pub fn workers(&self) -> Vec<&str> {
        let mut set: BTreeSet<&str> = BTreeSet::new();
        for item in &self.items {
            for a in &item.annotations {
                set.insert(&a.worker_id);
            }
        }
        set.into_iter().collect()
    }

    /// Corpus-wide label counts projected to `level`.
    pub fn label_priors(&self, level: Level, taxonomy: &Taxonomy) -> LabelPriors {
        let mut counts = vec![0u64; taxonomy.size(level)];
        for item in &self.items {
            for a in &item.annotations {
                counts[taxonomy.project_ordinal(a.ordinal, a.level, level)] += 1;
            }
        }
        LabelPriors { level, counts }
    }

    /// Per-item label counts projected to `level`.
    pub fn label_counts(&self, item: &Item, level: Level, taxonomy: &Taxonomy) -> Vec<u64> {
        let mut counts = vec![0u64; taxonomy.size(level)];
        for a in &item.annotations {
            counts[taxonomy.project_ordinal(a.ordinal, a.level, level)] += 1;
        }
        counts
    }

    /// Modal label of an item at `level`. Ties break by higher corpus-wide
    /// frequency, then lower ordinal.
    pub fn majority_label<'t>(
        &self,
        item: &Item,
        level: Level,
        taxonomy: &'t Taxonomy,
        priors: &LabelPriors,
    ) -> &'t str {
        let counts = self.label_counts(item, level, taxonomy);
        let max = *counts.iter().max().expect("item has annotations");
        let candidates: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == max).collect();
        taxonomy.label(priors.break_tie(&candidates), level)
    }

    /// Normalized annotation frequencies of an item at `level`.
    pub fn empirical_distribution(
        &self,
        item: &Item,
        level: Level,
        taxonomy: &Taxonomy,
    ) -> LabelDistribution {
        let counts = self.label_counts(item, level, taxonomy);
        let total: u64 = counts.iter().sum();
        LabelDistribution {
            level,
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        }
    }

    /// Ordinals whose empirical probability is at or above `threshold`.
    pub fn labels_at_or_above(
        &self,
        item: &Item,
        level: Level,
        taxonomy: &Taxonomy,
        threshold: f64,
    ) -> Vec<usize> {
        let dist = self.empirical_distribution(item, level, taxonomy);
        (0..dist.probs.len())
            .filter(|&i| dist.probs[i] >= threshold)
            .collect()
    }

    /// Multi-label gold: all labels at or above `threshold`; falls back to
    /// the majority label when nothing qualifies.
    pub fn multilabel_gold(
        &self,
        item: &Item,
        level: Level,
        taxonomy: &Taxonomy,
        priors: &LabelPriors,
        threshold: f64,
    ) -> Result<Vec<usize>, CorpusError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(CorpusError::InvalidThreshold(threshold));
        }
        let above = self.labels_at_or_above(item, level, taxonomy, threshold);
        if above.is_empty() {
            let label = self.majority_label(item, level, taxonomy, priors);
            Ok(vec![taxonomy.ordinal(label, level).expect("own label")])
        } else {
            Ok(above)
        }
    }

    /// Aggregate statistics at `level`.
    ///
    /// Agreement is the mean modal fraction per item. Raw entropy is the
    /// mean Shannon entropy in nats; the normalized variant divides each
    /// item's entropy by `ln(distinct observed labels)` (0 when only one
    /// label was observed).
    pub fn corpus_stats(&self, level: Level, taxonomy: &Taxonomy) -> Result<CorpusStats, CorpusError> {
        if self.items.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let n_items = self.items.len() as f64;
        let mut agreement = 0.0;
        let mut entropy_raw = 0.0;
        let mut entropy_norm = 0.0;
        let mut distinct_sum = 0.0;
        for item in &self.items {
            let counts = self.label_counts(item, level, taxonomy);
            let total: u64 = counts.iter().sum();
            let modal = *counts.iter().max().unwrap();
            agreement += modal as f64 / total as f64;
            let dist = self.empirical_distribution(item, level, taxonomy);
            let h = dist.entropy_nats();
            entropy_raw += h;
            let distinct = counts.iter().filter(|&&c| c > 0).count();
            distinct_sum += distinct as f64;
            if distinct > 1 {
                entropy_norm += h / (distinct as f64).ln();
            }
        }
        let workers = self.workers();
        let annotation_count = self.annotation_count();
        Ok(CorpusStats {
            level,
            item_count: self.items.len(),
            annotation_count,
            worker_count: workers.len(),
            annotations_per_worker_mean: annotation_count as f64 / workers.len() as f64,
            annotations_per_item_mean: annotation_count as f64 / n_items,
            distinct_labels_per_item_mean: distinct_sum / n_items,
            agreement_rate: agreement / n_items,
            mean_entropy_raw: entropy_raw / n_items,
            mean_entropy_normalized: entropy_norm / n_items,
        })
    }

    /// Per-worker item counts within a split, sorted by worker id.
    pub fn worker_item_counts(&self, split: Split) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for item in self.items_in(split) {
            for a in &item.annotations {
                *counts.entry(a.worker_id.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Split train-split workers at the median item count: workers at or
    /// below the median go to the low set.
    pub fn split_workers_by_median(
        &self,
    ) -> Result<(BTreeSet<String>, BTreeSet<String>), CorpusError> {
        let counts = self.worker_item_counts(Split::Train);
        if counts.len() < 2 {
            return Err(CorpusError::TooFewWorkers(counts.len()));
        }
        let mut sorted: Vec<usize> = counts.values().copied().collect();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mut low = BTreeSet::new();
        let mut high = BTreeSet::new();
        for (worker, count) in counts {
            if count as f64 <= median {
                low.insert(worker);
            } else {
                high.insert(worker);
            }
        }
        Ok((low, high))
    }
}

/// Read items from JSON lines; `#` lines are comments.
pub fn read_items(reader: impl BufRead) -> Result<Vec<Item>, CorpusError> {
    let mut items = Vec::new();
    for (line0, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut item: Item =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::Malformed {
                line: line0 + 1,
                message: e.to_string(),
            })?;
        if item.item_id.is_empty() {
            return Err(CorpusError::Malformed {
                line: line0 + 1,
                message: "empty item_id".into(),
            });
        }
        item.split = Split::Train; // set from annotations at ingest
        items.push(item);
    }
    Ok(items)
}

/// Read annotation records from tab-separated lines
/// `item_id \t worker_id \t label \t split`; `#` lines are comments.
pub fn read_annotation_records(
    reader: impl BufRead,
) -> Result<Vec<AnnotationRecord>, CorpusError> {
    let mut records = Vec::new();
    for (line0, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(CorpusError::Malformed {
                line: line0 + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let split = Split::parse(fields[3].trim()).ok_or_else(|| CorpusError::Malformed {
            line: line0 + 1,
            message: format!("unknown split {:?}", fields[3]),
        })?;
        records.push(AnnotationRecord {
            item_id: fields[0].trim().to_string(),
            worker_id: fields[1].trim().to_string(),
            label: fields[2].trim().to_string(),
            split,
        });
    }
    Ok(records)
}

/// Serialize items as JSON lines.
pub fn write_items(items: &[Item]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    out
}

/// Serialize annotation records as tab-separated lines.
pub fn write_annotation_records(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.item_id, r.worker_id, r.label, r.split
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_item(id: &str) -> Item {
        Item {
            item_id: id.to_string(),
            arg1: format!("arg1 of {id}"),
            arg2: format!("arg2 of {id}"),
            context_before: None,
            context_after: None,
            genre: None,
            split: Split::Train,
            annotations: Vec::new(),
        }
    }

    fn corpus_from(labels_per_item: &[(&str, &[&str])], taxonomy: &Taxonomy) -> Corpus {
        let items: Vec<Item> = labels_per_item.iter().map(|(id, _)| toy_item(id)).collect();
        let mut records = Vec::new();
        for (id, labels) in labels_per_item {
            for (w, label) in labels.iter().enumerate() {
                records.push(AnnotationRecord {
                    item_id: id.to_string(),
                    worker_id: format!("w{w}"),
                    label: label.to_string(),
                    split: Split::Train,
                });
            }
        }
        Corpus::ingest_annotations(items, records, taxonomy).unwrap()
    }

    #[test]
    fn ingest_counts_records_and_items() {
        let tax = Taxonomy::default_shipped();
        let labels: Vec<&str> = vec!["cause"; 10];
        let corpus = corpus_from(&[("i1", &labels), ("i2", &labels)], &tax);
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.annotation_count(), 20);
        assert_eq!(corpus.workers().len(), 10);
    }

    #[test]
    fn unknown_label_names_line_and_label() {
        let tax = Taxonomy::default_shipped();
        let items = vec![toy_item("i1")];
        let records = vec![AnnotationRecord {
            item_id: "i1".into(),
            worker_id: "w0".into(),
            label: "causex".into(),
            split: Split::Train,
        }];
        let err = Corpus::ingest_annotations(items, records, &tax).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("causex") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn duplicate_pair_rejected() {
        let tax = Taxonomy::default_shipped();
        let items = vec![toy_item("i1")];
        let rec = |w: &str| AnnotationRecord {
            item_id: "i1".into(),
            worker_id: w.into(),
            label: "cause".into(),
            split: Split::Train,
        };
        let err =
            Corpus::ingest_annotations(items, vec![rec("w0"), rec("w0")], &tax).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicatePair { .. }));
    }

    #[test]
    fn majority_unanimous_and_singleton() {
        let tax = Taxonomy::default_shipped();
        let ten_cause: Vec<&str> = vec!["cause"; 10];
        let corpus = corpus_from(&[("i1", &ten_cause), ("i2", &["norel"])], &tax);
        let priors = corpus.label_priors(Level::Two, &tax);
        let i1 = corpus.item("i1").unwrap();
        let i2 = corpus.item("i2").unwrap();
        assert_eq!(corpus.majority_label(i1, Level::Two, &tax, &priors), "cause");
        assert_eq!(corpus.majority_label(i2, Level::Two, &tax, &priors), "norel");
    }

    #[test]
    fn majority_tie_breaks_by_corpus_frequency() {
        let tax = Taxonomy::default_shipped();
        // i1 ties cause/conjunction 4:4; extra items make cause globally
        // more frequent than conjunction.
        let i1_labels = [
            "cause", "cause", "cause", "cause", "conjunction", "conjunction", "conjunction",
            "conjunction", "concession", "concession",
        ];
        let extra: Vec<&str> = vec!["cause"; 5];
        let corpus = corpus_from(&[("i1", &i1_labels), ("i2", &extra)], &tax);
        let priors = corpus.label_priors(Level::Two, &tax);
        let i1 = corpus.item("i1").unwrap();
        assert_eq!(corpus.majority_label(i1, Level::Two, &tax, &priors), "cause");
    }

    #[test]
    fn majority_tie_breaks_by_ordinal_when_priors_tie() {
        let tax = Taxonomy::default_shipped();
        let labels = ["cause", "conjunction"];
        let corpus = corpus_from(&[("i1", &labels)], &tax);
        let priors = corpus.label_priors(Level::Two, &tax);
        let i1 = corpus.item("i1").unwrap();
        // both labels occur once corpus-wide; "cause" has the lower ordinal
        assert_eq!(corpus.majority_label(i1, Level::Two, &tax, &priors), "cause");
    }

    #[test]
    fn empirical_distribution_examples() {
        let tax = Taxonomy::default_shipped();
        let labels = [
            "cause", "cause", "cause", "cause", "conjunction", "conjunction", "conjunction",
            "conjunction", "concession", "concession",
        ];
        let corpus = corpus_from(&[("i1", &labels)], &tax);
        let i1 = corpus.item("i1").unwrap();
        let dist = corpus.empirical_distribution(i1, Level::Two, &tax);
        let cause = tax.ordinal("cause", Level::Two).unwrap();
        let conj = tax.ordinal("conjunction", Level::Two).unwrap();
        let conc = tax.ordinal("concession", Level::Two).unwrap();
        assert_eq!(dist.probs[cause], 0.4);
        assert_eq!(dist.probs[conj], 0.4);
        assert_eq!(dist.probs[conc], 0.2);
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multilabel_gold_threshold_and_fallback() {
        let tax = Taxonomy::default_shipped();
        let labels = [
            "cause", "cause", "cause", "cause", "cause", "conjunction", "conjunction",
            "conjunction", "concession", "concession",
        ];
        let corpus = corpus_from(&[("i1", &labels)], &tax);
        let priors = corpus.label_priors(Level::Two, &tax);
        let i1 = corpus.item("i1").unwrap();
        let gold = corpus
            .multilabel_gold(i1, Level::Two, &tax, &priors, 0.2)
            .unwrap();
        let names: Vec<&str> = gold.iter().map(|&o| tax.label(o, Level::Two)).collect();
        assert_eq!(names, vec!["cause", "concession", "conjunction"]);

        // 10 distinct labels, each 0.1 < 0.2: falls back to tie-policy majority
        let distinct = [
            "synchronous", "precedence", "reason", "result", "arg1-as-cond", "arg1-as-goal",
            "arg1-as-denier", "contrast", "conjunction", "norel",
        ];
        let corpus2 = corpus_from(&[("i1", &distinct)], &tax);
        let priors2 = corpus2.label_priors(Level::Two, &tax);
        let i1 = corpus2.item("i1").unwrap();
        let gold2 = corpus2
            .multilabel_gold(i1, Level::Two, &tax, &priors2, 0.2)
            .unwrap();
        assert_eq!(gold2.len(), 1);
        let expect = corpus2.majority_label(i1, Level::Two, &tax, &priors2);
        assert_eq!(tax.label(gold2[0], Level::Two), expect);
    }

    #[test]
    fn multilabel_gold_rejects_bad_threshold() {
        let tax = Taxonomy::default_shipped();
        let corpus = corpus_from(&[("i1", &["cause"])], &tax);
        let priors = corpus.label_priors(Level::Two, &tax);
        let i1 = corpus.item("i1").unwrap();
        assert!(corpus
            .multilabel_gold(i1, Level::Two, &tax, &priors, 0.0)
            .is_err());
        assert!(corpus
            .multilabel_gold(i1, Level::Two, &tax, &priors, 1.5)
            .is_err());
    }

    #[test]
    fn stats_degenerate_cases() {
        let tax = Taxonomy::default_shipped();
        let unanimous: Vec<&str> = vec!["cause"; 10];
        let corpus = corpus_from(&[("i1", &unanimous)], &tax);
        let stats = corpus.corpus_stats(Level::Two, &tax).unwrap();
        assert_eq!(stats.agreement_rate, 1.0);
        assert_eq!(stats.mean_entropy_raw, 0.0);
        assert_eq!(stats.mean_entropy_normalized, 0.0);

        let even = ["cause", "cause", "cause", "cause", "cause", "conjunction", "conjunction", "conjunction", "conjunction", "conjunction"];
        let corpus = corpus_from(&[("i1", &even)], &tax);
        let stats = corpus.corpus_stats(Level::Two, &tax).unwrap();
        assert!((stats.agreement_rate - 0.5).abs() < 1e-12);
        assert!((stats.mean_entropy_normalized - 1.0).abs() < 1e-12);
        assert!((stats.mean_entropy_raw - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn median_split_cases() {
        let tax = Taxonomy::default_shipped();
        // 4 workers with 10/20/30/40 items: single-annotation items per worker
        let mut items = Vec::new();
        let mut records = Vec::new();
        let mut n = 0;
        for (w, count) in [("w1", 10), ("w2", 20), ("w3", 30), ("w4", 40)] {
            for _ in 0..count {
                let id = format!("i{n}");
                n += 1;
                items.push(toy_item(&id));
                records.push(AnnotationRecord {
                    item_id: id,
                    worker_id: w.into(),
                    label: "cause".into(),
                    split: Split::Train,
                });
            }
        }
        let corpus = Corpus::ingest_annotations(items, records, &tax).unwrap();
        let (low, high) = corpus.split_workers_by_median().unwrap();
        assert_eq!(low.iter().collect::<Vec<_>>(), ["w1", "w2"]);
        assert_eq!(high.iter().collect::<Vec<_>>(), ["w3", "w4"]);
    }

    #[test]
    fn median_split_odd_and_equal() {
        let tax = Taxonomy::default_shipped();
        let build = |counts: &[(&str, usize)]| {
            let mut items = Vec::new();
            let mut records = Vec::new();
            let mut n = 0;
            for (w, count) in counts {
                for _ in 0..*count {
                    let id = format!("i{n}");
                    n += 1;
                    items.push(toy_item(&id));
                    records.push(AnnotationRecord {
                        item_id: id,
                        worker_id: (*w).into(),
                        label: "cause".into(),
                        split: Split::Train,
                    });
                }
            }
            Corpus::ingest_annotations(items, records, &tax).unwrap()
        };
        let corpus = build(&[("w1", 10), ("w2", 20), ("w3", 30)]);
        let (low, high) = corpus.split_workers_by_median().unwrap();
        assert_eq!(low.iter().collect::<Vec<_>>(), ["w1", "w2"]);
        assert_eq!(high.iter().collect::<Vec<_>>(), ["w3"]);

        let corpus = build(&[("w1", 5), ("w2", 5), ("w3", 5)]);
        let (low, high) = corpus.split_workers_by_median().unwrap();
        assert_eq!(low.len(), 3);
        assert!(high.is_empty());
    }

    #[test]
    fn agreement_contribution_bounds() {
        let tax = Taxonomy::default_shipped();
        let labels = ["cause", "conjunction", "contrast", "norel"];
        let corpus = corpus_from(&[("i1", &labels)], &tax);
        let stats = corpus.corpus_stats(Level::Two, &tax).unwrap();
        assert!(stats.agreement_rate >= 1.0 / 4.0 && stats.agreement_rate <= 1.0);
    }

    #[test]
    fn tsv_round_trip_and_comments() {
        let tax = Taxonomy::default_shipped();
        let items_text = concat!(
            "# stamp\n",
            r#"{"item_id":"i1","arg1":"a b","arg2":"c d"}"#,
            "\n"
        );
        let ann_text = "# stamp\ni1\tw0\tcause\ttrain\ni1\tw1\tnorel\ttrain\n";
        let corpus = Corpus::ingest_readers(
            items_text.as_bytes(),
            ann_text.as_bytes(),
            &tax,
        )
        .unwrap();
        assert_eq!(corpus.annotation_count(), 2);
        assert_eq!(corpus.item("i1").unwrap().split, Split::Train);
    }

    #[test]
    fn malformed_line_is_numbered() {
        let err = read_annotation_records("i1\tw0\tcause\n".as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    proptest! {
        /// majority always equals argmax of the empirical distribution
        /// under the shared tie policy.
        #[test]
        fn majority_matches_argmax(labels in proptest::collection::vec(0usize..5, 1..12)) {
            let tax = Taxonomy::default_shipped();
            let names = ["cause", "conjunction", "contrast", "synchronous", "norel"];
            let labels: Vec<&str> = labels.iter().map(|&i| names[i]).collect();
            let corpus = corpus_from(&[("i1", &labels)], &tax);
            let priors = corpus.label_priors(Level::Two, &tax);
            let item = corpus.item("i1").unwrap();
            let maj = corpus.majority_label(item, Level::Two, &tax, &priors);
            let dist = corpus.empirical_distribution(item, Level::Two, &tax);
            let arg = tax.label(dist.argmax(&priors), Level::Two);
            prop_assert_eq!(maj, arg);
        }

        /// Level-1 distribution equals the Level-2 distribution summed over
        /// parent groups.
        #[test]
        fn projection_consistency(labels in proptest::collection::vec(0usize..5, 1..12)) {
            let tax = Taxonomy::default_shipped();
            let names = ["cause", "conjunction", "contrast", "synchronous", "norel"];
            let labels: Vec<&str> = labels.iter().map(|&i| names[i]).collect();
            let corpus = corpus_from(&[("i1", &labels)], &tax);
            let item = corpus.item("i1").unwrap();
            let d1 = corpus.empirical_distribution(item, Level::One, &tax);
            let d2 = corpus.empirical_distribution(item, Level::Two, &tax);
            let mut grouped = vec![0.0; tax.size(Level::One)];
            for (ord, p) in d2.probs.iter().enumerate() {
                grouped[tax.project_ordinal(ord, Level::Two, Level::One)] += p;
            }
            for (a, b) in d1.probs.iter().zip(&grouped) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// Raising the threshold never adds labels (before fallback).
        #[test]
        fn multilabel_monotone(labels in proptest::collection::vec(0usize..5, 1..12),
                               t1 in 0.05f64..0.5, t2 in 0.5f64..0.95) {
            let tax = Taxonomy::default_shipped();
            let names = ["cause", "conjunction", "contrast", "synchronous", "norel"];
            let labels: Vec<&str> = labels.iter().map(|&i| names[i]).collect();
            let corpus = corpus_from(&[("i1", &labels)], &tax);
            let item = corpus.item("i1").unwrap();
            let lo = corpus.labels_at_or_above(item, Level::Two, &tax, t1);
            let hi = corpus.labels_at_or_above(item, Level::Two, &tax, t2);
            for ord in &hi {
                prop_assert!(lo.contains(ord));
            }
        }
    }
}
