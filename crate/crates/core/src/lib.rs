//! Library for training and evaluating disagreement-aware classifiers on
//! unaggregated multi-annotator discourse-relation corpora.
//!
//! The crate covers the full experiment loop: taxonomy and corpus handling,
//! a small differentiable numeric core, desk-scale text encoders, the five
//! model kinds (single-truth, multi-label, label-distribution, multi-task,
//! annotator-embedding) with their prediction adapters, the three evaluation
//! tasks with significance testing, annotator profiling (nPMI, clustering),
//! and a synthetic-crowd generator that provides ground truth for recovery
//! experiments.

pub mod corpus;
pub mod encoders;
pub mod evaluation;
pub mod models;
pub mod perspectives;
pub mod rng;
pub mod synthgen;
pub mod taxonomy;
pub mod tensor_core;

pub use corpus::{AnnotationRecord, Corpus, CorpusStats, Item, LabelDistribution, LabelPriors, Split};
pub use taxonomy::{Level, Taxonomy};
