//! Scoring for the three tasks (single-label, label-distribution,
//! annotator-specific) plus the resampled paired t-test.
//!
//! Soft metrics: CE uses natural logs with a 1e-12 prediction floor; JSD
//! uses base-2 logs so its range is [0, 1]. MD is the L1 distance (range
//! [0, 2]) and ED the L2 distance (range [0, sqrt 2]). Lower is better for
//! all four.

use crate::corpus::{Corpus, LabelDistribution, LabelPriors, Split};
use crate::models::PredictionSet;
use crate::rng;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor_core::PROB_FLOOR;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("distribution length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("no prediction for item {0:?}")]
    MissingItem(String),
    #[error("no prediction for item {item:?} / worker {worker:?}")]
    MissingPair { item: String, worker: String },
    #[error("prediction set {adapter:?} carries no {expected} predictions")]
    WrongRoute { adapter: String, expected: &'static str },
    #[error("prediction level {pred} does not match requested level {requested}")]
    LevelMismatch { pred: Level, requested: Level },
    #[error("unknown predicted label {0:?}")]
    UnknownLabel(String),
    #[error("need at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("score vectors differ in length: {a} vs {b}")]
    ScoreLength { a: usize, b: usize },
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Mean soft-metric values over items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftMetricReport {
    pub ce: f64,
    pub jsd: f64,
    pub md: f64,
    pub ed: f64,
    pub n_items: usize,
}

/// Accuracy and macro-F1 with per-class detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardMetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    /// items for the single-label task, (item, worker) pairs for the
    /// annotator-specific task
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
    pub predicted: usize,
    /// whether the class enters the macro average
    pub included: bool,
}

fn kl_base2(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            s += pi * (pi / qi).log2();
        }
    }
    s
}

/// The four soft metrics between a predicted and a gold distribution.
pub fn soft_metrics(pred: &LabelDistribution, gold: &LabelDistribution) -> Result<(f64, f64, f64, f64), EvalError> {
    if pred.probs.len() != gold.probs.len() {
        return Err(EvalError::LengthMismatch {
            a: pred.probs.len(),
            b: gold.probs.len(),
        });
    }
    let ce = -gold
        .probs
        .iter()
        .zip(&pred.probs)
        .map(|(&g, &p)| if g > 0.0 { g * p.max(PROB_FLOOR).ln() } else { 0.0 })
        .sum::<f64>();
    let m: Vec<f64> = gold
        .probs
        .iter()
        .zip(&pred.probs)
        .map(|(&g, &p)| 0.5 * (g + p))
        .collect();
    let jsd = 0.5 * kl_base2(&gold.probs, &m) + 0.5 * kl_base2(&pred.probs, &m);
    let md = gold
        .probs
        .iter()
        .zip(&pred.probs)
        .map(|(&g, &p)| (g - p).abs())
        .sum::<f64>();
    let ed = gold
        .probs
        .iter()
        .zip(&pred.probs)
        .map(|(&g, &p)| (g - p) * (g - p))
        .sum::<f64>()
        .sqrt();
    Ok((ce, jsd, md, ed))
}

/// Macro-F1 policy for classes absent from both gold and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsentClassPolicy {
    /// Exclude absent-from-both classes from the macro average (default).
    Exclude,
    /// Count them as F1 = 0.
    Include,
}

impl Default for AbsentClassPolicy {
    fn default() -> Self {
        AbsentClassPolicy::Exclude
    }
}

fn hard_metrics(
    pairs: &[(usize, usize)], // (gold ordinal, predicted ordinal)
    labels: &[String],
    policy: AbsentClassPolicy,
) -> HardMetricReport {
    let n = labels.len();
    let mut tp = vec![0usize; n];
    let mut fp = vec![0usize; n];
    let mut fn_ = vec![0usize; n];
    let mut correct = 0usize;
    for &(gold, pred) in pairs {
        if gold == pred {
            correct += 1;
            tp[gold] += 1;
        } else {
            fn_[gold] += 1;
            fp[pred] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(n);
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for c in 0..n {
        let support = tp[c] + fn_[c];
        let predicted = tp[c] + fp[c];
        let precision = if predicted > 0 {
            tp[c] as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp[c] as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let included = match policy {
            AbsentClassPolicy::Include => true,
            AbsentClassPolicy::Exclude => support > 0 || predicted > 0,
        };
        if included {
            f1_sum += f1;
            f1_count += 1;
        }
        per_class.push(ClassScore {
            label: labels[c].clone(),
            f1,
            precision,
            recall,
            support,
            predicted,
            included,
        });
    }
    HardMetricReport {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1: if f1_count > 0 { f1_sum / f1_count as f64 } else { 0.0 },
        per_class,
        n_instances: pairs.len(),
    }
}

fn check_level(preds: &PredictionSet, level: Level) -> Result<(), EvalError> {
    if preds.level != level {
        return Err(EvalError::LevelMismatch {
            pred: preds.level,
            requested: level,
        });
    }
    Ok(())
}

/// Single-label task: predicted labels against per-item majority gold.
pub fn eval_single_label(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
    priors: &LabelPriors,
    policy: AbsentClassPolicy,
) -> Result<HardMetricReport, EvalError> {
    check_level(preds, level)?;
    let mut pairs = Vec::new();
    let mut saw_items = false;
    for item in corpus.items_in(split) {
        saw_items = true;
        let predicted = preds
            .item_labels
            .get(&item.item_id)
            .ok_or_else(|| EvalError::MissingItem(item.item_id.clone()))?;
        let pred_ord = taxonomy
            .ordinal(predicted, level)
            .ok_or_else(|| EvalError::UnknownLabel(predicted.clone()))?;
        let gold = corpus.majority_label(item, level, taxonomy, priors);
        let gold_ord = taxonomy.ordinal(gold, level).expect("gold label exists");
        pairs.push((gold_ord, pred_ord));
    }
    if !saw_items {
        return Err(EvalError::EmptyTestSplit);
    }
    if preds.item_labels.is_empty() {
        return Err(EvalError::WrongRoute {
            adapter: preds.adapter.clone(),
            expected: "single-label",
        });
    }
    Ok(hard_metrics(&pairs, taxonomy.labels(level), policy))
}

/// Label-distribution task: per-item soft metrics against the empirical
/// distribution, averaged over items.
pub fn eval_distribution(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
) -> Result<SoftMetricReport, EvalError> {
    check_level(preds, level)?;
    let per_item = per_item_soft_metrics(preds, corpus, split, level, taxonomy)?;
    let n = per_item.len();
    let mut sums = [0.0; 4];
    for m in &per_item {
        sums[0] += m.0;
        sums[1] += m.1;
        sums[2] += m.2;
        sums[3] += m.3;
    }
    Ok(SoftMetricReport {
        ce: sums[0] / n as f64,
        jsd: sums[1] / n as f64,
        md: sums[2] / n as f64,
        ed: sums[3] / n as f64,
        n_items: n,
    })
}

/// Per-item (ce, jsd, md, ed) in split iteration order; the resampling
/// harness consumes these.
pub fn per_item_soft_metrics(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
) -> Result<Vec<(f64, f64, f64, f64)>, EvalError> {
    check_level(preds, level)?;
    let mut out = Vec::new();
    for item in corpus.items_in(split) {
        let pred = preds
            .item_dists
            .get(&item.item_id)
            .ok_or_else(|| EvalError::MissingItem(item.item_id.clone()))?;
        let gold = corpus.empirical_distribution(item, level, taxonomy);
        out.push(soft_metrics(pred, &gold)?);
    }
    if out.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    Ok(out)
}

/// The label a prediction set assigns to an (item, worker) pair:
/// per-worker argmax when the set carries worker distributions, otherwise
/// the item-level single label replicated to every worker.
pub fn label_for_pair(
    preds: &PredictionSet,
    item_id: &str,
    worker_id: &str,
    taxonomy: &Taxonomy,
    level: Level,
    priors: &LabelPriors,
) -> Result<usize, EvalError> {
    if !preds.worker_dists.is_empty() {
        let per_worker = preds
            .worker_dists
            .get(item_id)
            .ok_or_else(|| EvalError::MissingItem(item_id.to_string()))?;
        let dist = per_worker.get(worker_id).ok_or_else(|| EvalError::MissingPair {
            item: item_id.to_string(),
            worker: worker_id.to_string(),
        })?;
        Ok(dist.argmax(priors))
    } else if !preds.item_labels.is_empty() {
        let label = preds
            .item_labels
            .get(item_id)
            .ok_or_else(|| EvalError::MissingItem(item_id.to_string()))?;
        taxonomy
            .ordinal(label, level)
            .ok_or_else(|| EvalError::UnknownLabel(label.clone()))
    } else {
        Err(EvalError::WrongRoute {
            adapter: preds.adapter.clone(),
            expected: "single-label or per-worker",
        })
    }
}

/// Annotator-specific task: every gold (item, worker) annotation is one
/// instance; global accuracy and macro-F1.
pub fn eval_annotator_specific(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
    priors: &LabelPriors,
    policy: AbsentClassPolicy,
) -> Result<HardMetricReport, EvalError> {
    eval_annotator_subset(preds, corpus, split, level, taxonomy, priors, policy, None)
}

/// Annotator-specific evaluation restricted to workers in `subset`
/// (all workers when `None`).
#[allow(clippy::too_many_arguments)]
pub fn eval_annotator_subset(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
    priors: &LabelPriors,
    policy: AbsentClassPolicy,
    subset: Option<&std::collections::BTreeSet<String>>,
) -> Result<HardMetricReport, EvalError> {
    check_level(preds, level)?;
    let mut pairs = Vec::new();
    for item in corpus.items_in(split) {
        for a in &item.annotations {
            if let Some(s) = subset {
                if !s.contains(&a.worker_id) {
                    continue;
                }
            }
            let gold = taxonomy.project_ordinal(a.ordinal, a.level, level);
            let pred = label_for_pair(preds, &item.item_id, &a.worker_id, taxonomy, level, priors)?;
            pairs.push((gold, pred));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    Ok(hard_metrics(&pairs, taxonomy.labels(level), policy))
}

/// Per-instance correctness (0/1) for the annotator-specific task, in
/// gold-annotation order, plus the item index of each instance.
pub fn per_pair_correctness(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
    priors: &LabelPriors,
) -> Result<(Vec<f64>, Vec<usize>), EvalError> {
    let mut scores = Vec::new();
    let mut item_of = Vec::new();
    for (idx, item) in corpus.items_in(split).enumerate() {
        for a in &item.annotations {
            let gold = taxonomy.project_ordinal(a.ordinal, a.level, level);
            let pred = label_for_pair(preds, &item.item_id, &a.worker_id, taxonomy, level, priors)?;
            scores.push(if gold == pred { 1.0 } else { 0.0 });
            item_of.push(idx);
        }
    }
    Ok((scores, item_of))
}

/// Per-item correctness (0/1) for the single-label task.
pub fn per_item_correctness(
    preds: &PredictionSet,
    corpus: &Corpus,
    split: Split,
    level: Level,
    taxonomy: &Taxonomy,
    priors: &LabelPriors,
) -> Result<Vec<f64>, EvalError> {
    check_level(preds, level)?;
    let mut out = Vec::new();
    for item in corpus.items_in(split) {
        let predicted = preds
            .item_labels
            .get(&item.item_id)
            .ok_or_else(|| EvalError::MissingItem(item.item_id.clone()))?;
        let pred_ord = taxonomy
            .ordinal(predicted, level)
            .ok_or_else(|| EvalError::UnknownLabel(predicted.clone()))?;
        let gold = corpus.majority_label(item, level, taxonomy, priors);
        let gold_ord = taxonomy.ordinal(gold, level).expect("gold label exists");
        out.push(if gold_ord == pred_ord { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Two-sided paired t-test on per-resample score differences.
///
/// Zero variance degenerates to p = 1 for zero mean difference and p = 0
/// (reported as `< 1e-12`) otherwise.
pub fn paired_ttest(scores_a: &[f64], scores_b: &[f64]) -> Result<f64, EvalError> {
    if scores_a.len() != scores_b.len() {
        return Err(EvalError::ScoreLength {
            a: scores_a.len(),
            b: scores_b.len(),
        });
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(EvalError::TooFewResamples(n));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(p.clamp(0.0, 1.0))
}

/// Shared resample index sets: `n_resamples` draws of `frac` of the items,
/// without replacement, from one seed. Both systems must be scored on the
/// same resamples.
pub fn resample_indices(
    n_items: usize,
    n_resamples: usize,
    frac: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let take = ((n_items as f64 * frac).round() as usize).clamp(1, n_items);
    let mut out = Vec::with_capacity(n_resamples);
    for r in 0..n_resamples {
        let mut rng = rng::stream(seed, &format!("resample-{r}"));
        let mut idx: Vec<usize> = (0..n_items).collect();
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx.sort_unstable();
        out.push(idx);
    }
    out
}

/// Mean of `scores` restricted to each resample.
pub fn resample_means(scores: &[f64], resamples: &[Vec<usize>]) -> Vec<f64> {
    resamples
        .iter()
        .map(|idx| idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64)
        .collect()
}

/// Resampled paired t-test over per-item scores of two systems.
/// Defaults: 30 resamples of 80% of items.
pub fn resampled_paired_ttest(
    per_item_a: &[f64],
    per_item_b: &[f64],
    n_resamples: usize,
    frac: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    if per_item_a.len() != per_item_b.len() {
        return Err(EvalError::ScoreLength {
            a: per_item_a.len(),
            b: per_item_b.len(),
        });
    }
    let resamples = resample_indices(per_item_a.len(), n_resamples, frac, seed);
    let a = resample_means(per_item_a, &resamples);
    let b = resample_means(per_item_b, &resamples);
    paired_ttest(&a, &b)
}
