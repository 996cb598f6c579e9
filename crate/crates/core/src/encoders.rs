//! Desk-scale text encoders: hashed word n-grams and precomputed vector
//! lookup. Both turn an item's argument pair into a fixed-length vector.
//!
//! Encoders are pure; the same input always yields the same output.

use crate::corpus::Item;
use crate::rng::fnv1a64;
use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("dimension {0} is not a power of two")]
    DimNotPowerOfTwo(usize),
    #[error("item {item:?} has an empty {field}")]
    EmptyArgument { item: String, field: &'static str },
    #[error("no precomputed vector for item {0:?}")]
    MissingItem(String),
    #[error("line {line}: vector for {item:?} has {got} entries, expected {expected}")]
    RaggedDimensions {
        line: usize,
        item: String,
        got: usize,
        expected: usize,
    },
    #[error("line {line}: malformed vector record: {message}")]
    Malformed { line: usize, message: String },
    #[error("vector file is empty")]
    EmptyFile,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A fixed-length representation of one item, stored sparsely.
/// `entries` holds (index, value) pairs sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedItem {
    pub item_id: String,
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl EncodedItem {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i as usize] = x;
        }
        v
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, x)| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EncodedItem) -> f64 {
        let mut dot = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += self.entries[i].1 * other.entries[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let na = self.l2_norm();
        let nb = other.l2_norm();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Anything that maps items to fixed-length vectors.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, item: &Item) -> Result<EncodedItem, EncodeError>;
    /// Stable identity recorded in model manifests.
    fn fingerprint(&self) -> String;
}

/// Sign-hashed word uni/bi-grams of the argument pair, L2-normalized.
///
/// Arg1 and Arg2 tokens are salted with distinct position tags before
/// hashing, and the boundary bigram (last word of Arg1, first word of Arg2)
/// is added, so encodings are order-sensitive. Context fields are excluded
/// unless `include_context` is set.
#[derive(Debug, Clone)]
pub struct HashedNgramEncoder {
    dim: usize,
    seed: u64,
    include_context: bool,
}

impl HashedNgramEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<HashedNgramEncoder, EncodeError> {
        if !dim.is_power_of_two() {
            return Err(EncodeError::DimNotPowerOfTwo(dim));
        }
        Ok(HashedNgramEncoder {
            dim,
            seed,
            include_context: false,
        })
    }

    pub fn with_context(mut self, include: bool) -> HashedNgramEncoder {
        self.include_context = include;
        self
    }

    fn add_ngrams(&self, tokens: &[String], salt: &str, acc: &mut HashMap<u32, f64>) {
        for tok in tokens {
            self.add_feature(&format!("{salt}:{tok}"), acc);
        }
        for pair in tokens.windows(2) {
            self.add_feature(&format!("{salt}:{}_{}", pair[0], pair[1]), acc);
        }
    }

    fn add_feature(&self, feature: &str, acc: &mut HashMap<u32, f64>) {
        let h = fnv1a64(feature.as_bytes()) ^ self.seed.rotate_left(32);
        let bucket = (h & (self.dim as u64 - 1)) as u32;
        let sign_hash = fnv1a64(feature.as_bytes()).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ self.seed;
        let sign = if sign_hash >> 63 == 0 { 1.0 } else { -1.0 };
        *acc.entry(bucket).or_insert(0.0) += sign;
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

impl Encoder for HashedNgramEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, item: &Item) -> Result<EncodedItem, EncodeError> {
        let a1 = tokenize(&item.arg1);
        let a2 = tokenize(&item.arg2);
        if a1.is_empty() {
            return Err(EncodeError::EmptyArgument {
                item: item.item_id.clone(),
                field: "arg1",
            });
        }
        if a2.is_empty() {
            return Err(EncodeError::EmptyArgument {
                item: item.item_id.clone(),
                field: "arg2",
            });
        }
        let mut acc: HashMap<u32, f64> = HashMap::new();
        self.add_ngrams(&a1, "a1", &mut acc);
        self.add_ngrams(&a2, "a2", &mut acc);
        self.add_feature(
            &format!("x:{}_{}", a1.last().unwrap(), a2.first().unwrap()),
            &mut acc,
        );
        if self.include_context {
            if let Some(cb) = &item.context_before {
                self.add_ngrams(&tokenize(cb), "cb", &mut acc);
            }
            if let Some(ca) = &item.context_after {
                self.add_ngrams(&tokenize(ca), "ca", &mut acc);
            }
        }
        let mut entries: Vec<(u32, f64)> =
            acc.into_iter().filter(|&(_, v)| v != 0.0).collect();
        entries.sort_unstable_by_key(|&(i, _)| i);
        let norm = entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        Ok(EncodedItem {
            item_id: item.item_id.clone(),
            dim: self.dim,
            entries,
        })
    }

    fn fingerprint(&self) -> String {
        format!(
            "hashed-ngram:d={}:seed={}:context={}",
            self.dim, self.seed, self.include_context
        )
    }
}

/// Lookup encoder over externally computed vectors, e.g. sentence
/// embeddings. Unknown ids are errors.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    fingerprint: String,
}

impl PrecomputedEncoder {
    /// Parse `item_id <ws> v1 <ws> v2 ...` lines; `#` lines are comments.
    /// The dimension is inferred from the first record.
    pub fn from_reader(reader: impl BufRead, source: &str) -> Result<PrecomputedEncoder, EncodeError> {
        let mut vectors = BTreeMap::new();
        let mut dim: Option<usize> = None;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (line0, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let item_id = parts
                .next()
                .ok_or_else(|| EncodeError::Malformed {
                    line: line0 + 1,
                    message: "missing item id".into(),
                })?
                .to_string();
            let values: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
            let values = values.map_err(|e| EncodeError::Malformed {
                line: line0 + 1,
                message: e.to_string(),
            })?;
            if values.is_empty() {
                return Err(EncodeError::Malformed {
                    line: line0 + 1,
                    message: "record has no vector entries".into(),
                });
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(EncodeError::RaggedDimensions {
                        line: line0 + 1,
                        item: item_id,
                        got: values.len(),
                        expected: d,
                    })
                }
                _ => {}
            }
            hash ^= fnv1a64(trimmed.as_bytes());
            vectors.insert(item_id, values);
        }
        let dim = dim.ok_or(EncodeError::EmptyFile)?;
        Ok(PrecomputedEncoder {
            dim,
            vectors,
            fingerprint: format!("precomputed:{source}:d={dim}:h={hash:016x}"),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Encoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, item: &Item) -> Result<EncodedItem, EncodeError> {
        let v = self
            .vectors
            .get(&item.item_id)
            .ok_or_else(|| EncodeError::MissingItem(item.item_id.clone()))?;
        Ok(EncodedItem {
            item_id: item.item_id.clone(),
            dim: self.dim,
            entries: v
                .iter()
                .enumerate()
                .filter(|&(_, &x)| x != 0.0)
                .map(|(i, &x)| (i as u32, x))
                .collect(),
        })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
