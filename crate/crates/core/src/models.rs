//! The five model kinds over a shared encoder, plus every prediction
//! adapter used by the three evaluation tasks.
//!
//! All kinds share a trunk (one hidden affine layer with tanh over the
//! encoder vector). ST trains cross-entropy against the majority label,
//! MULTI trains multi-label BCE against the 20%-threshold gold set, DIST
//! trains KL against the empirical distribution, MT holds one head per
//! training worker with per-instance summed cross-entropy, and AE mixes
//! text, annotator-embedding and annotation-profile representations through
//! learned scalar weights with per-annotation cross-entropy.

use crate::corpus::{Corpus, Item, LabelDistribution, LabelPriors, Split};
use crate::encoders::{EncodedItem, Encoder};
use crate::rng;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor_core::{
    bce_multilabel_loss, cross_entropy_loss, kl_divergence_loss, optimizer_step, sigmoid, softmax,
    AdamConfig, Checkpoint, GradStore, ParamStore,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use thiserror::Error;

/// The five model kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    St,
    Multi,
    Dist,
    Mt,
    Ae,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "st" => Some(ModelKind::St),
            "multi" => Some(ModelKind::Multi),
            "dist" => Some(ModelKind::Dist),
            "mt" => Some(ModelKind::Mt),
            "ae" => Some(ModelKind::Ae),
            _ => None,
        }
    }

    /// Prefix used in adapter tags, e.g. "ST" in "ST.top1".
    pub fn tag_prefix(self) -> &'static str {
        match self {
            ModelKind::St => "ST",
            ModelKind::Multi => "multi",
            ModelKind::Dist => "dist",
            ModelKind::Mt => "MT",
            ModelKind::Ae => "AE",
        }
    }

    pub fn is_perspectivist(self) -> bool {
        matches!(self, ModelKind::Mt | ModelKind::Ae)
    }

    pub fn all() -> [ModelKind; 5] {
        [
            ModelKind::St,
            ModelKind::Multi,
            ModelKind::Dist,
            ModelKind::Mt,
            ModelKind::Ae,
        ]
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag_prefix())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training at level 3 is unsupported; use level 1 or 2")]
    Level3Unsupported,
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("model kind {kind} does not support {what}")]
    UnsupportedRoute { kind: ModelKind, what: String },
    #[error("adapter {adapter:?} does not apply to a {kind} model")]
    AdapterKindMismatch { adapter: String, kind: ModelKind },
    #[error("unknown adapter tag {0:?}")]
    UnknownAdapter(String),
    #[error("no per-worker predictions to aggregate")]
    EmptyAggregate,
    #[error("mixed levels in aggregation: {a} vs {b}")]
    MixedLevels { a: Level, b: Level },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("prediction file line {line}: {message}")]
    PredictionFile { line: usize, message: String },
    #[error(transparent)]
    Encode(#[from] crate::encoders::EncodeError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor_core::TensorError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. The paper does not specify a training
/// procedure; these are artifact defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub adam: AdamConfig,
    pub multilabel_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            hidden_dim: 256,
            adam: AdamConfig::default(),
            multilabel_threshold: 0.2,
        }
    }
}

/// Per-epoch and per-batch mean losses recorded during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct TrunkIds {
    w1: usize,
    b1: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct HeadIds {
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct AeIds {
    worker_emb: usize,
    label_emb: usize,
    mix: usize,
}

#[derive(Debug, Clone, Default)]
struct ModelIds {
    trunk: TrunkIds,
    heads: Vec<HeadIds>,
    ae: Option<AeIds>,
}

/// A trained parameter bundle of one kind with everything needed for
/// inference: label set, priors for tie-breaks, worker index and
/// annotation profiles for the perspectivist kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub level: Level,
    /// Label names in ordinal order at `level`.
    pub labels: Vec<String>,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub encoder_fingerprint: String,
    pub seed: u64,
    /// Train-split label counts; the prediction-time tie-break.
    pub priors: LabelPriors,
    /// worker id -> head/embedding ordinal (MT, AE).
    pub worker_index: Option<BTreeMap<String, usize>>,
    /// Per worker ordinal: (label ordinal, weight) of their training labels
    /// (AE annotation profiles; weights sum to 1 per worker).
    pub worker_profiles: Option<Vec<Vec<(usize, f64)>>>,
    pub store: ParamStore,
    pub train_log: TrainLog,
    #[serde(skip)]
    ids: ModelIds,
}

fn n_labels_of(level: Level, taxonomy: &Taxonomy) -> usize {
    taxonomy.size(level)
}

/// Per-item training targets, precomputed once.
enum Targets {
    Single(Vec<usize>),
    Sets(Vec<Vec<usize>>),
    Dists(Vec<Vec<f64>>),
    /// (worker ordinal, label ordinal) per annotation, per item.
    PerWorker(Vec<Vec<(usize, usize)>>),
}

/// Train a model of `kind` on the train split.
///
/// Deterministic given identical corpus, config and seed.
pub fn train(
    kind: ModelKind,
    corpus: &Corpus,
    encoder: &dyn Encoder,
    taxonomy: &Taxonomy,
    level: Level,
    config: &TrainConfig,
    seed: u64,
) -> Result<Model, ModelError> {
    if level == Level::Three {
        return Err(ModelError::Level3Unsupported);
    }
    let items: Vec<&Item> = corpus.items_in(Split::Train).collect();
    if items.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let n_labels = n_labels_of(level, taxonomy);
    let hidden = config.hidden_dim;
    let dim = encoder.dim();

    let encoded: Vec<EncodedItem> = items
        .iter()
        .map(|it| encoder.encode(it))
        .collect::<Result<_, _>>()?;

    // priors over the train split only: the model must not see dev/test
    let mut prior_counts = vec![0u64; n_labels];
    for it in &items {
        for (ord, c) in corpus.label_counts(it, level, taxonomy).iter().enumerate() {
            prior_counts[ord] += c;
        }
    }
    let priors = LabelPriors {
        level,
        counts: prior_counts,
    };

    // head/embedding order is sorted worker id, for stable init draws
    let worker_index: Option<BTreeMap<String, usize>> = if kind.is_perspectivist() {
        let mut names: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for it in &items {
            for a in &it.annotations {
                names.insert(&a.worker_id);
            }
        }
        Some(
            names
                .into_iter()
                .enumerate()
                .map(|(i, w)| (w.to_string(), i))
                .collect(),
        )
    } else {
        None
    };

    let targets = match kind {
        ModelKind::St => Targets::Single(
            items
                .iter()
                .map(|it| {
                    let label = corpus.majority_label(it, level, taxonomy, &priors);
                    taxonomy.ordinal(label, level).expect("majority label exists")
                })
                .collect(),
        ),
        ModelKind::Multi => Targets::Sets(
            items
                .iter()
                .map(|it| {
                    corpus.multilabel_gold(it, level, taxonomy, &priors, config.multilabel_threshold)
                })
                .collect::<Result<_, _>>()?,
        ),
        ModelKind::Dist => Targets::Dists(
            items
                .iter()
                .map(|it| corpus.empirical_distribution(it, level, taxonomy).probs)
                .collect(),
        ),
        ModelKind::Mt | ModelKind::Ae => {
            let widx = worker_index.as_ref().unwrap();
            Targets::PerWorker(
                items
                    .iter()
                    .map(|it| {
                        it.annotations
                            .iter()
                            .map(|a| {
                                (
                                    widx[&a.worker_id],
                                    taxonomy.project_ordinal(a.ordinal, a.level, level),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
    };

    // AE annotation profiles: normalized label counts per worker
    let worker_profiles = if kind == ModelKind::Ae {
        let widx = worker_index.as_ref().unwrap();
        let mut counts: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); widx.len()];
        if let Targets::PerWorker(per_item) = &targets {
            for anns in per_item {
                for &(w, l) in anns {
                    *counts[w].entry(l).or_insert(0) += 1;
                }
            }
        }
        Some(
            counts
                .into_iter()
                .map(|m| {
                    let total: u64 = m.values().sum();
                    m.into_iter()
                        .map(|(l, c)| (l, c as f64 / total as f64))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut init_rng = rng::stream(seed, "model-init");
    let mut store = ParamStore::new(seed);
    let trunk = TrunkIds {
        w1: store.init_matrix("trunk.w1", &[dim, hidden], dim, hidden, &mut init_rng),
        b1: store.init_zeros("trunk.b1", &[hidden]),
    };
    let mut heads = Vec::new();
    let mut ae_ids = None;
    match kind {
        ModelKind::St | ModelKind::Multi | ModelKind::Dist => {
            heads.push(HeadIds {
                w2: store.init_matrix("head.w2", &[n_labels, hidden], hidden, n_labels, &mut init_rng),
                b2: store.init_zeros("head.b2", &[n_labels]),
            });
        }
        ModelKind::Mt => {
            for worker in worker_index.as_ref().unwrap().keys() {
                heads.push(HeadIds {
                    w2: store.init_matrix(
                        &format!("head.{worker}.w2"),
                        &[n_labels, hidden],
                        hidden,
                        n_labels,
                        &mut init_rng,
                    ),
                    b2: store.init_zeros(&format!("head.{worker}.b2"), &[n_labels]),
                });
            }
        }
        ModelKind::Ae => {
            heads.push(HeadIds {
                w2: store.init_matrix("head.w2", &[n_labels, hidden], hidden, n_labels, &mut init_rng),
                b2: store.init_zeros("head.b2", &[n_labels]),
            });
            let n_workers = worker_index.as_ref().unwrap().len();
            ae_ids = Some(AeIds {
                worker_emb: store.init_matrix(
                    "ae.worker_emb",
                    &[n_workers, hidden],
                    hidden,
                    hidden,
                    &mut init_rng,
                ),
                label_emb: store.init_matrix(
                    "ae.label_emb",
                    &[n_labels, hidden],
                    hidden,
                    hidden,
                    &mut init_rng,
                ),
                mix: store.init_with("ae.mix", &[3], vec![1.0, 1.0, 1.0]),
            });
        }
    }

    let ids = ModelIds {
        trunk,
        heads,
        ae: ae_ids,
    };

    let mut model = Model {
        kind,
        level,
        labels: taxonomy.labels(level).to_vec(),
        hidden_dim: hidden,
        input_dim: dim,
        encoder_fingerprint: encoder.fingerprint(),
        seed,
        priors,
        worker_index,
        worker_profiles,
        store,
        train_log: TrainLog::default(),
        ids,
    };

    run_training(&mut model, &encoded, &targets, config, seed)?;
    model.store.check_finite()?;
    Ok(model)
}

fn run_training(
    model: &mut Model,
    encoded: &[EncodedItem],
    targets: &Targets,
    config: &TrainConfig,
    seed: u64,
) -> Result<(), ModelError> {
    let hidden = model.hidden_dim;
    let n_labels = model.labels.len();
    let mut grads = model.store.zero_grads();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut act = vec![0.0; hidden];
    let mut dact = vec![0.0; hidden];
    let mut logits = vec![0.0; n_labels];
    let mut hmix = vec![0.0; hidden];
    let mut dhmix = vec![0.0; hidden];

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::stream(seed, &format!("shuffle-epoch-{epoch}"));
        order.shuffle(&mut shuffle_rng);

        // AE annotation embeddings are refreshed from the label table once
        // per epoch; within the epoch the values are constants.
        let abar: Option<Vec<Vec<f64>>> = model.ids.ae.map(|ae| {
            let label_emb = model.store.value(ae.label_emb);
            model
                .worker_profiles
                .as_ref()
                .unwrap()
                .iter()
                .map(|profile| {
                    let mut v = vec![0.0; hidden];
                    for &(l, w) in profile {
                        let row = &label_emb[l * hidden..(l + 1) * hidden];
                        for h in 0..hidden {
                            v[h] += w * row[h];
                        }
                    }
                    v
                })
                .collect()
        });

        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.reset();
            let mut batch_loss = 0.0;
            // instance count that the batch mean divides by
            let instance_count = match targets {
                Targets::PerWorker(per_item) if model.kind == ModelKind::Ae => {
                    batch.iter().map(|&i| per_item[i].len()).sum::<usize>()
                }
                _ => batch.len(),
            };
            let scale = 1.0 / instance_count as f64;

            for &i in batch {
                let x = &encoded[i];
                trunk_forward(&model.store, &model.ids.trunk, x, hidden, &mut act);
                dact.iter_mut().for_each(|d| *d = 0.0);

                match targets {
                    Targets::Single(t) => {
                        head_forward(&model.store, &model.ids.heads[0], &act, n_labels, hidden, &mut logits);
                        let lv = cross_entropy_loss(&logits, t[i])?;
                        batch_loss += lv.loss * scale;
                        let dlogits: Vec<f64> = lv.grad.iter().map(|g| g * scale).collect();
                        head_backward(&model.store, &mut grads, &model.ids.heads[0], &act, &dlogits, &mut dact, n_labels, hidden);
                    }
                    Targets::Sets(t) => {
                        head_forward(&model.store, &model.ids.heads[0], &act, n_labels, hidden, &mut logits);
                        let lv = bce_multilabel_loss(&logits, &t[i])?;
                        batch_loss += lv.loss * scale;
                        let dlogits: Vec<f64> = lv.grad.iter().map(|g| g * scale).collect();
                        head_backward(&model.store, &mut grads, &model.ids.heads[0], &act, &dlogits, &mut dact, n_labels, hidden);
                    }
                    Targets::Dists(t) => {
                        head_forward(&model.store, &model.ids.heads[0], &act, n_labels, hidden, &mut logits);
                        let lv = kl_divergence_loss(&logits, &t[i])?;
                        batch_loss += lv.loss * scale;
                        let dlogits: Vec<f64> = lv.grad.iter().map(|g| g * scale).collect();
                        head_backward(&model.store, &mut grads, &model.ids.heads[0], &act, &dlogits, &mut dact, n_labels, hidden);
                    }
                    Targets::PerWorker(per_item) if model.kind == ModelKind::Mt => {
                        // cross-entropy per annotating worker's head, summed
                        for &(w, l) in &per_item[i] {
                            let head = &model.ids.heads[w];
                            head_forward(&model.store, head, &act, n_labels, hidden, &mut logits);
                            let lv = cross_entropy_loss(&logits, l)?;
                            batch_loss += lv.loss * scale;
                            let dlogits: Vec<f64> = lv.grad.iter().map(|g| g * scale).collect();
                            head_backward(&model.store, &mut grads, head, &act, &dlogits, &mut dact, n_labels, hidden);
                        }
                    }
                    Targets::PerWorker(per_item) => {
                        // AE: per-annotation cross-entropy on the mixed representation
                        let ae = model.ids.ae.as_ref().unwrap();
                        let abar = abar.as_ref().unwrap();
                        let mix = model.store.value(ae.mix);
                        let (w_text, w_ann, w_lab) = (mix[0], mix[1], mix[2]);
                        for &(w, l) in &per_item[i] {
                            let worker_emb = model.store.value(ae.worker_emb);
                            let e_row = &worker_emb[w * hidden..(w + 1) * hidden];
                            let a_row = &abar[w];
                            for h in 0..hidden {
                                hmix[h] = w_text * act[h] + w_ann * e_row[h] + w_lab * a_row[h];
                            }
                            head_forward(&model.store, &model.ids.heads[0], &hmix, n_labels, hidden, &mut logits);
                            let lv = cross_entropy_loss(&logits, l)?;
                            batch_loss += lv.loss * scale;
                            let dlogits: Vec<f64> = lv.grad.iter().map(|g| g * scale).collect();
                            dhmix.iter_mut().for_each(|d| *d = 0.0);
                            head_backward(&model.store, &mut grads, &model.ids.heads[0], &hmix, &dlogits, &mut dhmix, n_labels, hidden);

                            let mut d_text = 0.0;
                            let mut d_ann = 0.0;
                            let mut d_lab = 0.0;
                            for h in 0..hidden {
                                d_text += dhmix[h] * act[h];
                                d_ann += dhmix[h] * e_row[h];
                                d_lab += dhmix[h] * a_row[h];
                                dact[h] += w_text * dhmix[h];
                            }
                            {
                                let g_mix = grads.grad_mut(ae.mix);
                                g_mix[0] += d_text;
                                g_mix[1] += d_ann;
                                g_mix[2] += d_lab;
                            }
                            {
                                let g_emb = grads.grad_mut(ae.worker_emb);
                                for h in 0..hidden {
                                    g_emb[w * hidden + h] += w_ann * dhmix[h];
                                }
                            }
                            {
                                let g_lab = grads.grad_mut(ae.label_emb);
                                for &(lp, wgt) in &model.worker_profiles.as_ref().unwrap()[w] {
                                    for h in 0..hidden {
                                        g_lab[lp * hidden + h] += w_lab * wgt * dhmix[h];
                                    }
                                }
                            }
                        }
                    }
                }

                trunk_backward(&model.store, &mut grads, &model.ids.trunk, x, &act, &dact, hidden);
            }

            optimizer_step(&mut model.store, &grads, &config.adam)?;
            model.train_log.batch_losses.push(batch_loss);
            epoch_loss += batch_loss * instance_count as f64;
            epoch_count += instance_count;
        }
        model.train_log.epoch_losses.push(epoch_loss / epoch_count as f64);
    }
    Ok(())
}

fn trunk_forward(store: &ParamStore, ids: &TrunkIds, x: &EncodedItem, hidden: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(store.value(ids.b1));
    let w1 = store.value(ids.w1);
    for &(i, v) in &x.entries {
        let row = &w1[i as usize * hidden..(i as usize + 1) * hidden];
        for h in 0..hidden {
            out[h] += row[h] * v;
        }
    }
    for o in out.iter_mut() {
        *o = o.tanh();
    }
}

fn trunk_backward(
    store: &ParamStore,
    grads: &mut GradStore,
    ids: &TrunkIds,
    x: &EncodedItem,
    act: &[f64],
    dact: &[f64],
    hidden: usize,
) {
    let _ = store;
    let mut dz = vec![0.0; hidden];
    for h in 0..hidden {
        dz[h] = dact[h] * (1.0 - act[h] * act[h]);
    }
    {
        let gb = grads.grad_mut(ids.b1);
        for h in 0..hidden {
            gb[h] += dz[h];
        }
    }
    let gw = grads.grad_mut(ids.w1);
    for &(i, v) in &x.entries {
        let row = &mut gw[i as usize * hidden..(i as usize + 1) * hidden];
        for h in 0..hidden {
            row[h] += dz[h] * v;
        }
    }
}

fn head_forward(
    store: &ParamStore,
    ids: &HeadIds,
    act: &[f64],
    n_labels: usize,
    hidden: usize,
    logits: &mut Vec<f64>,
) {
    logits.clear();
    logits.extend_from_slice(store.value(ids.b2));
    let w2 = store.value(ids.w2);
    for l in 0..n_labels {
        let row = &w2[l * hidden..(l + 1) * hidden];
        let mut s = logits[l];
        for h in 0..hidden {
            s += row[h] * act[h];
        }
        logits[l] = s;
    }
}

fn head_backward(
    store: &ParamStore,
    grads: &mut GradStore,
    ids: &HeadIds,
    act: &[f64],
    dlogits: &[f64],
    dact: &mut [f64],
    n_labels: usize,
    hidden: usize,
) {
    {
        let gb = grads.grad_mut(ids.b2);
        for l in 0..n_labels {
            gb[l] += dlogits[l];
        }
    }
    let w2 = store.value(ids.w2);
    let gw = grads.grad_mut(ids.w2);
    for l in 0..n_labels {
        let wrow = &w2[l * hidden..(l + 1) * hidden];
        let grow = &mut gw[l * hidden..(l + 1) * hidden];
        let d = dlogits[l];
        for h in 0..hidden {
            grow[h] += d * act[h];
            dact[h] += d * wrow[h];
        }
    }
}

impl Model {
    fn rebuild_ids(&mut self) -> Result<(), ModelError> {
        self.store.rebuild_index();
        let id = |name: &str, store: &ParamStore| {
            store
                .id(name)
                .map_err(|_| ModelError::ModelFile(format!("missing parameter {name:?}")))
        };
        let trunk = TrunkIds {
            w1: id("trunk.w1", &self.store)?,
            b1: id("trunk.b1", &self.store)?,
        };
        let mut heads = Vec::new();
        let mut ae = None;
        match self.kind {
            ModelKind::St | ModelKind::Multi | ModelKind::Dist => {
                heads.push(HeadIds {
                    w2: id("head.w2", &self.store)?,
                    b2: id("head.b2", &self.store)?,
                });
            }
            ModelKind::Mt => {
                for worker in self.worker_index.as_ref().into_iter().flat_map(|m| m.keys()) {
                    heads.push(HeadIds {
                        w2: id(&format!("head.{worker}.w2"), &self.store)?,
                        b2: id(&format!("head.{worker}.b2"), &self.store)?,
                    });
                }
            }
            ModelKind::Ae => {
                heads.push(HeadIds {
                    w2: id("head.w2", &self.store)?,
                    b2: id("head.b2", &self.store)?,
                });
                ae = Some(AeIds {
                    worker_emb: id("ae.worker_emb", &self.store)?,
                    label_emb: id("ae.label_emb", &self.store)?,
                    mix: id("ae.mix", &self.store)?,
                });
            }
        }
        self.ids = ModelIds { trunk, heads, ae };
        Ok(())
    }

    fn n_labels(&self) -> usize {
        self.labels.len()
    }

    fn encode_checked(&self, item: &Item, encoder: &dyn Encoder) -> Result<EncodedItem, ModelError> {
        let x = encoder.encode(item)?;
        debug_assert_eq!(x.dim, self.input_dim);
        Ok(x)
    }

    /// Item-level distribution: softmax for ST and DIST, renormalized
    /// per-label sigmoids for MULTI. MT/AE use the annotator paths.
    pub fn predict_distribution(
        &self,
        item: &Item,
        encoder: &dyn Encoder,
    ) -> Result<LabelDistribution, ModelError> {
        if self.kind.is_perspectivist() {
            return Err(ModelError::UnsupportedRoute {
                kind: self.kind,
                what: "item-level distribution (use predict_for_annotator)".into(),
            });
        }
        let x = self.encode_checked(item, encoder)?;
        let logits = self.item_logits(&x);
        let probs = match self.kind {
            ModelKind::Multi => {
                let sig: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                let sum: f64 = sig.iter().sum();
                sig.iter().map(|&s| s / sum).collect()
            }
            _ => softmax(&logits),
        };
        Ok(LabelDistribution::new(self.level, probs)?)
    }

    fn item_logits(&self, x: &EncodedItem) -> Vec<f64> {
        let hidden = self.hidden_dim;
        let mut act = vec![0.0; hidden];
        trunk_forward(&self.store, &self.ids.trunk, x, hidden, &mut act);
        let mut logits = vec![0.0; self.n_labels()];
        head_forward(&self.store, &self.ids.heads[0], &act, self.n_labels(), hidden, &mut logits);
        logits
    }

    /// Single-label prediction: argmax of the kind's distribution under the
    /// train-corpus tie policy.
    pub fn predict_top1(&self, item: &Item, encoder: &dyn Encoder) -> Result<&str, ModelError> {
        let dist = self.predict_distribution(item, encoder)?;
        Ok(&self.labels[dist.argmax(&self.priors)])
    }

    /// Distribution a specific annotator would produce (MT: their head;
    /// AE: the mixed representation with their embeddings).
    pub fn predict_for_annotator(
        &self,
        item: &Item,
        worker_id: &str,
        encoder: &dyn Encoder,
    ) -> Result<LabelDistribution, ModelError> {
        if !self.kind.is_perspectivist() {
            return Err(ModelError::UnsupportedRoute {
                kind: self.kind,
                what: "annotator-specific prediction".into(),
            });
        }
        let w = *self
            .worker_index
            .as_ref()
            .unwrap()
            .get(worker_id)
            .ok_or_else(|| ModelError::UnknownAnnotator(worker_id.to_string()))?;
        let x = self.encode_checked(item, encoder)?;
        let hidden = self.hidden_dim;
        let n_labels = self.n_labels();
        let mut act = vec![0.0; hidden];
        trunk_forward(&self.store, &self.ids.trunk, &x, hidden, &mut act);
        let mut logits = vec![0.0; n_labels];
        match self.kind {
            ModelKind::Mt => {
                head_forward(&self.store, &self.ids.heads[w], &act, n_labels, hidden, &mut logits);
            }
            ModelKind::Ae => {
                let ae = self.ids.ae.as_ref().unwrap();
                let mix = self.store.value(ae.mix);
                let (w_text, w_ann, w_lab) = (mix[0], mix[1], mix[2]);
                let worker_emb = self.store.value(ae.worker_emb);
                let e_row = &worker_emb[w * hidden..(w + 1) * hidden];
                let label_emb = self.store.value(ae.label_emb);
                let mut hmix = vec![0.0; hidden];
                for (h, hm) in hmix.iter_mut().enumerate() {
                    *hm = w_text * act[h] + w_ann * e_row[h];
                }
                for &(lp, wgt) in &self.worker_profiles.as_ref().unwrap()[w] {
                    let row = &label_emb[lp * hidden..(lp + 1) * hidden];
                    for h in 0..hidden {
                        hmix[h] += w_lab * wgt * row[h];
                    }
                }
                head_forward(&self.store, &self.ids.heads[0], &hmix, n_labels, hidden, &mut logits);
            }
            _ => unreachable!(),
        }
        Ok(LabelDistribution::new(self.level, softmax(&logits))?)
    }

    /// Workers seen in training, sorted.
    pub fn known_workers(&self) -> Vec<&str> {
        self.worker_index
            .as_ref()
            .map(|m| m.keys().map(|s| s.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn to_file_json(&self, config_hash: &str) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            config_hash: &'a str,
            model: &'a Model,
            checkpoint_version: u32,
        }
        serde_json::to_string(&Doc {
            config_hash,
            model: self,
            checkpoint_version: crate::tensor_core::CHECKPOINT_VERSION,
        })
        .expect("model serializes")
    }

    pub fn from_file_json(text: &str) -> Result<Model, ModelError> {
        #[derive(Deserialize)]
        struct Doc {
            #[allow(dead_code)]
            config_hash: String,
            model: Model,
            checkpoint_version: u32,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| ModelError::ModelFile(e.to_string()))?;
        if doc.checkpoint_version != crate::tensor_core::CHECKPOINT_VERSION {
            return Err(ModelError::ModelFile(format!(
                "unsupported checkpoint version {}",
                doc.checkpoint_version
            )));
        }
        let mut model = doc.model;
        model.rebuild_ids()?;
        model.store.check_finite()?;
        Ok(model)
    }

    /// Standalone tensor-core checkpoint of the parameters.
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::new(self.store.clone(), config_hash, self.seed)
    }
}

/// Modal label over per-worker argmaxes, ties broken by the corpus policy.
/// Returns the winning ordinal.
pub fn aggregate_majority(
    per_worker: &BTreeMap<String, LabelDistribution>,
    priors: &LabelPriors,
) -> Result<usize, ModelError> {
    if per_worker.is_empty() {
        return Err(ModelError::EmptyAggregate);
    }
    let mut level = None;
    let mut votes: BTreeMap<usize, u64> = BTreeMap::new();
    for dist in per_worker.values() {
        match level {
            None => level = Some(dist.level),
            Some(l) if l != dist.level => {
                return Err(ModelError::MixedLevels { a: l, b: dist.level })
            }
            _ => {}
        }
        *votes.entry(dist.argmax(priors)).or_insert(0) += 1;
    }
    let max = *votes.values().max().unwrap();
    let candidates: Vec<usize> = votes
        .iter()
        .filter(|&(_, &c)| c == max)
        .map(|(&o, _)| o)
        .collect();
    Ok(priors.break_tie(&candidates))
}

/// Coordinate-wise mean of per-worker distributions.
pub fn aggregate_mean(
    per_worker: &BTreeMap<String, LabelDistribution>,
) -> Result<LabelDistribution, ModelError> {
    let mut iter = per_worker.values();
    let first = iter.next().ok_or(ModelError::EmptyAggregate)?;
    let mut mean = first.probs.clone();
    let level = first.level;
    let mut n = 1.0;
    for dist in iter {
        if dist.level != level {
            return Err(ModelError::MixedLevels { a: level, b: dist.level });
        }
        for (m, p) in mean.iter_mut().zip(&dist.probs) {
            *m += p;
        }
        n += 1.0;
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    Ok(LabelDistribution::new(level, mean)?)
}

/// How a model's raw outputs become a task prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRoute {
    /// Single label per item (ST.top1, multi.top1, dist.top1).
    Top1,
    /// Distribution per item (ST.logit, ..., MT.logit, AE.logit).
    Logit,
    /// Most frequently predicted label across per-worker argmaxes
    /// (MT.maj, AE.maj).
    Maj,
    /// Per-(item, worker) distributions (MT.worker, AE.worker).
    Worker,
}

/// A parsed adapter tag, e.g. "AE.logit".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adapter {
    pub kind: ModelKind,
    pub route: AdapterRoute,
}

impl Adapter {
    pub fn parse(tag: &str) -> Result<Adapter, ModelError> {
        let (prefix, route) = tag
            .split_once('.')
            .ok_or_else(|| ModelError::UnknownAdapter(tag.to_string()))?;
        let kind = ModelKind::all()
            .into_iter()
            .find(|k| k.tag_prefix() == prefix)
            .ok_or_else(|| ModelError::UnknownAdapter(tag.to_string()))?;
        let route = match route {
            "top1" => AdapterRoute::Top1,
            "logit" => AdapterRoute::Logit,
            "maj" => AdapterRoute::Maj,
            "worker" => AdapterRoute::Worker,
            _ => return Err(ModelError::UnknownAdapter(tag.to_string())),
        };
        let valid = match kind {
            ModelKind::St | ModelKind::Multi | ModelKind::Dist => {
                matches!(route, AdapterRoute::Top1 | AdapterRoute::Logit)
            }
            ModelKind::Mt | ModelKind::Ae => {
                matches!(route, AdapterRoute::Maj | AdapterRoute::Logit | AdapterRoute::Worker)
            }
        };
        if !valid {
            return Err(ModelError::UnknownAdapter(tag.to_string()));
        }
        Ok(Adapter { kind, route })
    }

    pub fn tag(&self) -> String {
        let route = match self.route {
            AdapterRoute::Top1 => "top1",
            AdapterRoute::Logit => "logit",
            AdapterRoute::Maj => "maj",
            AdapterRoute::Worker => "worker",
        };
        format!("{}.{route}", self.kind.tag_prefix())
    }

    /// Every adapter a model of `kind` supports.
    pub fn all_for(kind: ModelKind) -> Vec<Adapter> {
        match kind {
            ModelKind::St | ModelKind::Multi | ModelKind::Dist => vec![
                Adapter { kind, route: AdapterRoute::Top1 },
                Adapter { kind, route: AdapterRoute::Logit },
            ],
            ModelKind::Mt | ModelKind::Ae => vec![
                Adapter { kind, route: AdapterRoute::Maj },
                Adapter { kind, route: AdapterRoute::Logit },
                Adapter { kind, route: AdapterRoute::Worker },
            ],
        }
    }
}

/// Predictions for a set of items under one adapter. Exactly one of the
/// three maps is populated, matching the adapter's route.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub adapter: String,
    pub level: Level,
    pub item_labels: BTreeMap<String, String>,
    pub item_dists: BTreeMap<String, LabelDistribution>,
    /// item -> worker -> distribution
    pub worker_dists: BTreeMap<String, BTreeMap<String, LabelDistribution>>,
}

impl PredictionSet {
    pub fn new(adapter: &str, level: Level) -> PredictionSet {
        PredictionSet {
            adapter: adapter.to_string(),
            level,
            item_labels: BTreeMap::new(),
            item_dists: BTreeMap::new(),
            worker_dists: BTreeMap::new(),
        }
    }

    /// Serialize as one JSON record per (item[, worker]).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (item, label) in &self.item_labels {
            let rec = PredRecord {
                adapter: self.adapter.clone(),
                level: self.level,
                item: item.clone(),
                worker: None,
                label: Some(label.clone()),
                dist: None,
            };
            out.push_str(&serde_json::to_string(&rec).unwrap());
            out.push('\n');
        }
        for (item, dist) in &self.item_dists {
            let rec = PredRecord {
                adapter: self.adapter.clone(),
                level: self.level,
                item: item.clone(),
                worker: None,
                label: None,
                dist: Some(dist.probs.clone()),
            };
            out.push_str(&serde_json::to_string(&rec).unwrap());
            out.push('\n');
        }
        for (item, per_worker) in &self.worker_dists {
            for (worker, dist) in per_worker {
                let rec = PredRecord {
                    adapter: self.adapter.clone(),
                    level: self.level,
                    item: item.clone(),
                    worker: Some(worker.clone()),
                    label: None,
                    dist: Some(dist.probs.clone()),
                };
                out.push_str(&serde_json::to_string(&rec).unwrap());
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<PredictionSet, ModelError> {
        let mut set: Option<PredictionSet> = None;
        for (line0, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rec: PredRecord =
                serde_json::from_str(trimmed).map_err(|e| ModelError::PredictionFile {
                    line: line0 + 1,
                    message: e.to_string(),
                })?;
            let set = set.get_or_insert_with(|| PredictionSet::new(&rec.adapter, rec.level));
            if set.adapter != rec.adapter || set.level != rec.level {
                return Err(ModelError::PredictionFile {
                    line: line0 + 1,
                    message: format!(
                        "mixed adapters in one file: {} vs {}",
                        set.adapter, rec.adapter
                    ),
                });
            }
            match (rec.worker, rec.label, rec.dist) {
                (None, Some(label), None) => {
                    set.item_labels.insert(rec.item, label);
                }
                (None, None, Some(probs)) => {
                    set.item_dists
                        .insert(rec.item, LabelDistribution::new(rec.level, probs)?);
                }
                (Some(worker), None, Some(probs)) => {
                    set.worker_dists
                        .entry(rec.item)
                        .or_default()
                        .insert(worker, LabelDistribution::new(rec.level, probs)?);
                }
                _ => {
                    return Err(ModelError::PredictionFile {
                        line: line0 + 1,
                        message: "record must carry a label or a distribution".into(),
                    })
                }
            }
        }
        set.ok_or_else(|| ModelError::PredictionFile {
            line: 0,
            message: "empty prediction file".into(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PredRecord {
    adapter: String,
    level: Level,
    item: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    worker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dist: Option<Vec<f64>>,
}

/// Run a model over a corpus split under one adapter.
///
/// For MT/AE the `logit` route averages per-worker distributions over each
/// item's own annotators by default; `all_workers` switches to every worker
/// seen during training.
pub fn apply_adapter(
    model: &Model,
    adapter: Adapter,
    corpus: &Corpus,
    split: Split,
    encoder: &dyn Encoder,
    all_workers: bool,
) -> Result<PredictionSet, ModelError> {
    if adapter.kind != model.kind {
        return Err(ModelError::AdapterKindMismatch {
            adapter: adapter.tag(),
            kind: model.kind,
        });
    }
    let mut set = PredictionSet::new(&adapter.tag(), model.level);
    for item in corpus.items_in(split) {
        match adapter.route {
            AdapterRoute::Top1 => {
                let label = model.predict_top1(item, encoder)?;
                set.item_labels.insert(item.item_id.clone(), label.to_string());
            }
            AdapterRoute::Logit if !model.kind.is_perspectivist() => {
                let dist = model.predict_distribution(item, encoder)?;
                set.item_dists.insert(item.item_id.clone(), dist);
            }
            AdapterRoute::Logit => {
                let per_worker = per_worker_dists(model, item, encoder, all_workers)?;
                set.item_dists
                    .insert(item.item_id.clone(), aggregate_mean(&per_worker)?);
            }
            AdapterRoute::Maj => {
                let per_worker = per_worker_dists(model, item, encoder, all_workers)?;
                let ord = aggregate_majority(&per_worker, &model.priors)?;
                set.item_labels
                    .insert(item.item_id.clone(), model.labels[ord].clone());
            }
            AdapterRoute::Worker => {
                let per_worker = per_worker_dists(model, item, encoder, false)?;
                set.worker_dists.insert(item.item_id.clone(), per_worker);
            }
        }
    }
    Ok(set)
}

fn per_worker_dists(
    model: &Model,
    item: &Item,
    encoder: &dyn Encoder,
    all_workers: bool,
) -> Result<BTreeMap<String, LabelDistribution>, ModelError> {
    let mut out = BTreeMap::new();
    if all_workers {
        for worker in model.known_workers() {
            out.insert(
                worker.to_string(),
                model.predict_for_annotator(item, worker, encoder)?,
            );
        }
    } else {
        for a in &item.annotations {
            if !out.contains_key(&a.worker_id) {
                out.insert(
                    a.worker_id.clone(),
                    model.predict_for_annotator(item, &a.worker_id, encoder)?,
                );
            }
        }
    }
    Ok(out)
}
