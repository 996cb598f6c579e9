//! The hierarchical discourse-relation label space and its level projections.
//!
//! A taxonomy has three levels (coarse to fine). Every finer label has
//! exactly one parent at the level above, labels carry stable ordinals
//! assigned by file order, and a distinguished "no relation" label exists at
//! every level and maps to itself.

use serde::Deserialize;
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Granularity level of the label hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    One,
    Two,
    Three,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::One => 0,
            Level::Two => 1,
            Level::Three => 2,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Level, TaxonomyError> {
        match n {
            1 => Ok(Level::One),
            2 => Ok(Level::Two),
            3 => Ok(Level::Three),
            _ => Err(TaxonomyError::InvalidLevel(n)),
        }
    }
}

impl TryFrom<u8> for Level {
    type Error = TaxonomyError;
    fn try_from(n: u8) -> Result<Level, TaxonomyError> {
        Level::from_number(n)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.number()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to parse taxonomy document: {0}")]
    Parse(String),
    #[error("incomplete hierarchy: expected 3 non-empty levels, found {0}")]
    IncompleteHierarchy(usize),
    #[error("duplicate label name {label:?} at level {level}")]
    DuplicateLabel { label: String, level: u8 },
    #[error("label {label:?} at level {level} has no parent edge")]
    OrphanLabel { label: String, level: u8 },
    #[error("label {label:?} at level {level} names unknown parent {parent:?}")]
    UnknownParent {
        label: String,
        level: u8,
        parent: String,
    },
    #[error("missing norel label {label:?} at level {level}")]
    MissingNorel { label: String, level: u8 },
    #[error("norel label {label:?} does not map to itself at level {level}")]
    NorelNotFixed { label: String, level: u8 },
    #[error(
        "label {label:?} occurs at levels {fine} and {coarse} but its ancestor chain does not \
         pass through the coarser occurrence"
    )]
    InconsistentDuplicate { label: String, fine: u8, coarse: u8 },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label {label:?} lives at level {level}; cannot refine to finer level {target}")]
    NoRefinement { label: String, level: u8, target: u8 },
    #[error("invalid level {0}; levels are 1, 2 or 3")]
    InvalidLevel(u8),
}

#[derive(Deserialize)]
struct LevelDoc {
    labels: Vec<String>,
    #[serde(default)]
    parents: HashMap<String, String>,
}

#[derive(Deserialize)]
struct TaxonomyDoc {
    norel: String,
    levels: Vec<LevelDoc>,
}

/// The three-level label hierarchy with parent maps and stable ordinals.
///
/// Immutable after load; safe to share read-only across threads.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    levels: [Vec<String>; 3],
    ordinals: [HashMap<String, usize>; 3],
    /// parent ordinal per label: `[L2 -> L1, L3 -> L2]`.
    parents: [Vec<usize>; 2],
    norel: String,
}

const DEFAULT_TAXONOMY: &str = include_str!("../assets/default_taxonomy.json");

impl Taxonomy {
    /// Load a taxonomy from a JSON document listing labels per level and
    /// parent edges for levels 2 and 3.
    pub fn load(document: &str) -> Result<Taxonomy, TaxonomyError> {
        let doc: TaxonomyDoc =
            serde_json::from_str(document).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        if doc.levels.len() != 3 || doc.levels.iter().any(|l| l.labels.is_empty()) {
            return Err(TaxonomyError::IncompleteHierarchy(
                doc.levels.iter().filter(|l| !l.labels.is_empty()).count(),
            ));
        }

        let norel = normalize_label(&doc.norel);
        let mut levels: [Vec<String>; 3] = Default::default();
        let mut ordinals: [HashMap<String, usize>; 3] = Default::default();
        for (li, level_doc) in doc.levels.iter().enumerate() {
            for raw in &level_doc.labels {
                let label = normalize_label(raw);
                if ordinals[li].contains_key(&label) {
                    return Err(TaxonomyError::DuplicateLabel {
                        label,
                        level: li as u8 + 1,
                    });
                }
                ordinals[li].insert(label.clone(), levels[li].len());
                levels[li].push(label);
            }
            if !ordinals[li].contains_key(&norel) {
                return Err(TaxonomyError::MissingNorel {
                    label: norel.clone(),
                    level: li as u8 + 1,
                });
            }
        }

        let mut parents: [Vec<usize>; 2] = Default::default();
        for fine in 1..3usize {
            let coarse = fine - 1;
            let mut edges = vec![usize::MAX; levels[fine].len()];
            for (raw_child, raw_parent) in &doc.levels[fine].parents {
                let child = normalize_label(raw_child);
                let parent = normalize_label(raw_parent);
                let child_ord = *ordinals[fine].get(&child).ok_or_else(|| {
                    TaxonomyError::UnknownLabel(child.clone())
                })?;
                let parent_ord = *ordinals[coarse].get(&parent).ok_or_else(|| {
                    TaxonomyError::UnknownParent {
                        label: child.clone(),
                        level: fine as u8 + 1,
                        parent: parent.clone(),
                    }
                })?;
                edges[child_ord] = parent_ord;
            }
            for (ord, &p) in edges.iter().enumerate() {
                if p == usize::MAX {
                    return Err(TaxonomyError::OrphanLabel {
                        label: levels[fine][ord].clone(),
                        level: fine as u8 + 1,
                    });
                }
            }
            parents[fine - 1] = edges;
        }

        let tax = Taxonomy {
            levels,
            ordinals,
            parents,
            norel,
        };
        tax.check_norel_fixed()?;
        tax.check_duplicate_consistency()?;
        Ok(tax)
    }

    /// The taxonomy shipped with the crate: a PDTB-3-style 5/17/29 hierarchy.
    pub fn default_shipped() -> Taxonomy {
        Taxonomy::load(DEFAULT_TAXONOMY).expect("shipped taxonomy is valid")
    }

    fn check_norel_fixed(&self) -> Result<(), TaxonomyError> {
        for fine in [Level::Two, Level::Three] {
            let ord = self.ordinals[fine.index()][&self.norel];
            let parent_ord = self.parents[fine.index() - 1][ord];
            let coarse = fine.index() - 1;
            if self.levels[coarse][parent_ord] != self.norel {
                return Err(TaxonomyError::NorelNotFixed {
                    label: self.norel.clone(),
                    level: fine.number(),
                });
            }
        }
        Ok(())
    }

    /// A label name may occur at several levels only if the finer
    /// occurrence's ancestor chain passes through the coarser one.
    fn check_duplicate_consistency(&self) -> Result<(), TaxonomyError> {
        for fine in (1..3usize).rev() {
            for (ord, label) in self.levels[fine].iter().enumerate() {
                for coarse in 0..fine {
                    if self.ordinals[coarse].contains_key(label) {
                        let mut cur = ord;
                        for step in (coarse..fine).rev() {
                            cur = self.parents[step][cur];
                        }
                        if &self.levels[coarse][cur] != label {
                            return Err(TaxonomyError::InconsistentDuplicate {
                                label: label.clone(),
                                fine: fine as u8 + 1,
                                coarse: coarse as u8 + 1,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of labels at a level.
    pub fn size(&self, level: Level) -> usize {
        self.levels[level.index()].len()
    }

    /// Labels of a level in ordinal order.
    pub fn labels(&self, level: Level) -> &[String] {
        &self.levels[level.index()]
    }

    /// The distinguished "no relation" label.
    pub fn norel(&self) -> &str {
        &self.norel
    }

    /// Ordinal of `label` at `level`, if it exists there.
    pub fn ordinal(&self, label: &str, level: Level) -> Option<usize> {
        self.ordinals[level.index()].get(label).copied()
    }

    /// Label name for an ordinal at a level.
    pub fn label(&self, ordinal: usize, level: Level) -> &str {
        &self.levels[level.index()][ordinal]
    }

    /// Finest level at which `label` occurs.
    pub fn level_of(&self, label: &str) -> Option<Level> {
        for level in [Level::Three, Level::Two, Level::One] {
            if self.ordinals[level.index()].contains_key(label) {
                return Some(level);
            }
        }
        None
    }

    /// Project a label to `target_level`: identity when the label exists at
    /// that level, otherwise the unique ancestor. Refinement (targeting a
    /// finer level than the label's own) is an error.
    pub fn map_label(&self, label: &str, target_level: Level) -> Result<&str, TaxonomyError> {
        if self.ordinal(label, target_level).is_some() {
            return Ok(self.levels[target_level.index()]
                [self.ordinals[target_level.index()][label]]
            .as_str());
        }
        let own = self
            .level_of(label)
            .ok_or_else(|| TaxonomyError::UnknownLabel(label.to_string()))?;
        if own.index() < target_level.index() {
            return Err(TaxonomyError::NoRefinement {
                label: label.to_string(),
                level: own.number(),
                target: target_level.number(),
            });
        }
        let mut ord = self.ordinals[own.index()][label];
        let mut at = own.index();
        while at > target_level.index() {
            ord = self.parents[at - 1][ord];
            at -= 1;
        }
        Ok(self.levels[target_level.index()][ord].as_str())
    }

    /// Ordinal-level projection used in hot paths: maps an ordinal at `from`
    /// to its ancestor ordinal at `to`. `from` must be at least as fine.
    pub fn project_ordinal(&self, ordinal: usize, from: Level, to: Level) -> usize {
        debug_assert!(from.index() >= to.index());
        let mut ord = ordinal;
        let mut at = from.index();
        while at > to.index() {
            ord = self.parents[at - 1][ord];
            at -= 1;
        }
        ord
    }

    /// Resolve a raw label string to `(finest level, ordinal)`.
    pub fn resolve(&self, label: &str) -> Result<(Level, usize), TaxonomyError> {
        let level = self
            .level_of(label)
            .ok_or_else(|| TaxonomyError::UnknownLabel(label.to_string()))?;
        Ok((level, self.ordinals[level.index()][label]))
    }
}

/// Lowercase ASCII with hyphens; used for stable file and report keys.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.trim().chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_ascii_alphanumeric() {
            out.push(ch);
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_has_paper_sizes() {
        let tax = Taxonomy::default_shipped();
        assert_eq!(tax.size(Level::One), 5);
        assert_eq!(tax.size(Level::Two), 17);
        assert_eq!(tax.size(Level::Three), 29);
        assert_eq!(tax.norel(), "norel");
    }

    #[test]
    fn map_label_examples() {
        let tax = Taxonomy::default_shipped();
        assert_eq!(tax.map_label("conjunction", Level::One).unwrap(), "expansion");
        assert_eq!(tax.map_label("norel", Level::One).unwrap(), "norel");
        assert_eq!(tax.map_label("cause", Level::Two).unwrap(), "cause");
        assert_eq!(tax.map_label("cause", Level::One).unwrap(), "contingency");
        assert_eq!(tax.map_label("succession", Level::One).unwrap(), "temporal");
    }

    #[test]
    fn refinement_is_rejected() {
        let tax = Taxonomy::default_shipped();
        let err = tax.map_label("expansion", Level::Two).unwrap_err();
        assert!(matches!(err, TaxonomyError::NoRefinement { .. }));
    }

    #[test]
    fn unknown_label_is_named() {
        let tax = Taxonomy::default_shipped();
        let err = tax.map_label("causex", Level::One).unwrap_err();
        assert!(err.to_string().contains("causex"));
    }

    #[test]
    fn projection_idempotent_and_commutes() {
        let tax = Taxonomy::default_shipped();
        for label in tax.labels(Level::Two) {
            let l1 = tax.map_label(label, Level::One).unwrap().to_string();
            assert_eq!(tax.map_label(&l1, Level::One).unwrap(), l1);
        }
        for label in tax.labels(Level::Three) {
            let direct = tax.map_label(label, Level::One).unwrap().to_string();
            let l2 = tax.map_label(label, Level::Two).unwrap().to_string();
            let via = tax.map_label(&l2, Level::One).unwrap();
            assert_eq!(direct, via, "projection must commute for {label}");
        }
    }

    #[test]
    fn single_level_document_is_incomplete() {
        let doc = r#"{"norel":"norel","levels":[{"labels":["a","b","norel"]}]}"#;
        let err = Taxonomy::load(doc).unwrap_err();
        assert!(matches!(err, TaxonomyError::IncompleteHierarchy(_)));
    }

    #[test]
    fn orphan_label_is_named() {
        let doc = r#"{
            "norel": "norel",
            "levels": [
                {"labels": ["x", "norel"]},
                {"labels": ["a", "norel"], "parents": {"norel": "norel"}},
                {"labels": ["a", "norel"], "parents": {"a": "a", "norel": "norel"}}
            ]
        }"#;
        let err = Taxonomy::load(doc).unwrap_err();
        match err {
            TaxonomyError::OrphanLabel { label, level } => {
                assert_eq!(label, "a");
                assert_eq!(level, 2);
            }
            other => panic!("expected orphan error, got {other}"),
        }
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let doc = r#"{
            "norel": "norel",
            "levels": [
                {"labels": ["x", "x", "norel"]},
                {"labels": ["a", "norel"], "parents": {"a": "x", "norel": "norel"}},
                {"labels": ["b", "norel"], "parents": {"b": "a", "norel": "norel"}}
            ]
        }"#;
        let err = Taxonomy::load(doc).unwrap_err();
        assert!(matches!(err, TaxonomyError::DuplicateLabel { .. }));
    }

    #[test]
    fn missing_norel_is_rejected() {
        let doc = r#"{
            "norel": "norel",
            "levels": [
                {"labels": ["x", "norel"]},
                {"labels": ["a"], "parents": {"a": "x"}},
                {"labels": ["b"], "parents": {"b": "a"}}
            ]
        }"#;
        let err = Taxonomy::load(doc).unwrap_err();
        assert!(matches!(err, TaxonomyError::MissingNorel { .. }));
    }

    #[test]
    fn cross_level_duplicate_must_be_chain_consistent() {
        // "same" occurs at L2 and L3 but the L3 occurrence is parented
        // under a different L2 label.
        let doc = r#"{
            "norel": "norel",
            "levels": [
                {"labels": ["x", "norel"]},
                {"labels": ["same", "other", "norel"],
                 "parents": {"same": "x", "other": "x", "norel": "norel"}},
                {"labels": ["same", "norel"],
                 "parents": {"same": "other", "norel": "norel"}}
            ]
        }"#;
        let err = Taxonomy::load(doc).unwrap_err();
        assert!(matches!(err, TaxonomyError::InconsistentDuplicate { .. }));
    }

    #[test]
    fn level_two_parent_example() {
        let doc = r#"{
            "norel": "norel",
            "levels": [
                {"labels": ["contingency", "norel"]},
                {"labels": ["cause", "norel"], "parents": {"cause": "contingency", "norel": "norel"}},
                {"labels": ["reason", "norel"], "parents": {"reason": "cause", "norel": "norel"}}
            ]
        }"#;
        let tax = Taxonomy::load(doc).unwrap();
        assert_eq!(tax.map_label("cause", Level::One).unwrap(), "contingency");
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_label("Cause+Belief"), "cause-belief");
        assert_eq!(normalize_label("  Level of Detail "), "level-of-detail");
        assert_eq!(normalize_label("NOREL"), "norel");
    }

    #[test]
    fn ordinals_are_bijective_file_order() {
        let tax = Taxonomy::default_shipped();
        for level in [Level::One, Level::Two, Level::Three] {
            let n = tax.size(level);
            let mut seen = vec![false; n];
            for label in tax.labels(level) {
                let ord = tax.ordinal(label, level).unwrap();
                assert!(!seen[ord]);
                seen[ord] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
        assert_eq!(tax.ordinal("temporal", Level::One), Some(0));
        assert_eq!(tax.ordinal("norel", Level::One), Some(4));
    }
}
