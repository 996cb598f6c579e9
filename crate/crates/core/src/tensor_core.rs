//! Minimal differentiable numeric core: named dense parameters, softmax and
//! sigmoid, the three training losses (cross-entropy, multi-label BCE, KL),
//! an adaptive-moment optimizer, and a finite-difference gradient checker.
//!
//! Everything is deterministic given a seed; parameter iteration order is
//! the insertion order of `ParamStore`.

use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("target ordinal {target} out of range for {len} logits")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("empty target set; apply the multilabel fallback before the loss")]
    EmptyTargetSet,
    #[error("length mismatch: logits {logits} vs target {target}")]
    LengthMismatch { logits: usize, target: usize },
    #[error("non-finite value in {context} (parameter {name:?}, index {index})")]
    NonFinite {
        context: String,
        name: String,
        index: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("gradient shape mismatch for {name:?}: {got} vs {expected}")]
    GradShape {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Numerically stable softmax (max subtraction). Output sums to 1 and is
/// strictly positive.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Floor applied before taking logs of externally supplied probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar loss plus its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Softmax cross-entropy against a single target ordinal.
///
/// `loss = -ln softmax(logits)[target]`, `grad = softmax(logits) - onehot`.
pub fn cross_entropy_loss(logits: &[f64], target: usize) -> Result<LossValue, TensorError> {
    if target >= logits.len() {
        return Err(TensorError::TargetOutOfRange {
            target,
            len: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let mut grad = softmax(logits);
    let loss = log_sum - logits[target];
    grad[target] -= 1.0;
    Ok(LossValue { loss, grad })
}

/// Per-label binary cross-entropy averaged over labels, with `y = 1` exactly
/// for ordinals in `target_set`.
pub fn bce_multilabel_loss(
    logits: &[f64],
    target_set: &[usize],
) -> Result<LossValue, TensorError> {
    if target_set.is_empty() {
        return Err(TensorError::EmptyTargetSet);
    }
    if let Some(&bad) = target_set.iter().find(|&&t| t >= logits.len()) {
        return Err(TensorError::TargetOutOfRange {
            target: bad,
            len: logits.len(),
        });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &z) in logits.iter().enumerate() {
        let y = if target_set.contains(&i) { 1.0 } else { 0.0 };
        // stable form of -[y ln s + (1-y) ln(1-s)]
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / n;
    }
    Ok(LossValue {
        loss: loss / n,
        grad,
    })
}

/// KL divergence from `target_dist` to `softmax(logits)`:
/// `sum p_i (ln p_i - ln q_i)` with `0 ln 0 = 0`; `grad = q - p`.
pub fn kl_divergence_loss(logits: &[f64], target_dist: &[f64]) -> Result<LossValue, TensorError> {
    if logits.len() != target_dist.len() {
        return Err(TensorError::LengthMismatch {
            logits: logits.len(),
            target: target_dist.len(),
        });
    }
    let q = softmax(logits);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let p = target_dist[i];
        if p > 0.0 {
            loss += p * (p.ln() - q[i].ln());
        }
        grad[i] = q[i] - p;
    }
    Ok(LossValue { loss, grad })
}

/// One named parameter with its optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named dense parameters with per-parameter moments and a step counter.
/// Shapes are fixed after initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub rng_seed: u64,
    pub step: u64,
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Optimizer constants. Defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> ParamStore {
        ParamStore {
            rng_seed,
            step: 0,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Add a matrix initialized uniform(-a, a) with
    /// `a = sqrt(6 / (fan_in + fan_out))`, drawn from `rng`.
    pub fn init_matrix(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let len: usize = shape.iter().product();
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value: Vec<f64> = (0..len).map(|_| rng.random_range(-a..a)).collect();
        self.push(name, shape, value)
    }

    /// Add a zero-initialized parameter (biases).
    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        let len: usize = shape.iter().product();
        self.push(name, shape, vec![0.0; len])
    }

    /// Add a parameter with explicit values.
    pub fn init_with(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> usize {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        self.push(name, shape, value)
    }

    fn push(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} already exists"
        );
        let len = value.len();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize, TensorError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.params[id].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Gradient buffers aligned with this store's parameters.
    pub fn zero_grads(&self) -> GradStore {
        GradStore {
            grads: self.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Rebuild the name index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Verify every entry is finite.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        for p in &self.params {
            if let Some(idx) = p.value.iter().position(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite {
                    context: "parameters".into(),
                    name: p.name.clone(),
                    index: idx,
                });
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulators, index-aligned with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn grad_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.grads[id]
    }

    pub fn grad(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Apply one adaptive-moment update in place. Aborts on NaN gradients.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradStore,
    config: &AdamConfig,
) -> Result<(), TensorError> {
    if grads.grads.len() != params.params.len() {
        return Err(TensorError::GradShape {
            name: "<store>".into(),
            got: grads.grads.len(),
            expected: params.params.len(),
        });
    }
    for (p, g) in params.params.iter().zip(&grads.grads) {
        if g.len() != p.len() {
            return Err(TensorError::GradShape {
                name: p.name.clone(),
                got: g.len(),
                expected: p.len(),
            });
        }
        if let Some(idx) = g.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                context: "gradients".into(),
                name: p.name.clone(),
                index: idx,
            });
        }
    }
    params.step += 1;
    let t = params.step as f64;
    let bias1 = 1.0 - config.beta1.powf(t);
    let bias2 = 1.0 - config.beta2.powf(t);
    for (p, g) in params.params.iter_mut().zip(&grads.grads) {
        for i in 0..p.value.len() {
            p.m[i] = config.beta1 * p.m[i] + (1.0 - config.beta1) * g[i];
            p.v[i] = config.beta2 * p.v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = p.m[i] / bias1;
            let v_hat = p.v[i] / bias2;
            p.value[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Compare an analytic gradient against central differences at `probes`
/// random coordinates; returns the maximum relative error.
pub fn gradient_check<F>(
    mut loss_fn: F,
    x: &mut [f64],
    analytic: &[f64],
    probes: usize,
    h: f64,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0);
    assert_eq!(x.len(), analytic.len());
    let mut rng = rng::stream(seed, "gradient_check");
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..x.len());
        let orig = x[i];
        x[i] = orig + h;
        let f_plus = loss_fn(x);
        x[i] = orig - h;
        let f_minus = loss_fn(x);
        x[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-6 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Versioned checkpoint of a parameter store. Round-trips bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub store: ParamStore,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(store: ParamStore, config_hash: &str, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            store,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, TensorError> {
        let mut ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.store.rebuild_index();
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l.loss - LN2).abs() < 1e-12);
        assert!((l.grad[0] + 0.5).abs() < 1e-12);
        assert!((l.grad[1] - 0.5).abs() < 1e-12);

        let l = cross_entropy_loss(&[30.0, -30.0], 0).unwrap();
        assert!(l.loss < 1e-12);

        let l = cross_entropy_loss(&[1.0, 0.0, 0.0], 1).unwrap();
        let expect = (std::f64::consts::E + 2.0).ln();
        assert!((l.loss - expect).abs() < 1e-12);
        assert!((l.loss - 1.5514).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&[0.0, 0.0], 2),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let l = bce_multilabel_loss(&[0.0, 0.0], &[0]).unwrap();
        assert!((l.loss - LN2).abs() < 1e-12);

        let l = bce_multilabel_loss(&[30.0], &[0]).unwrap();
        assert!(l.loss < 1e-12);

        let l = bce_multilabel_loss(&[0.0, 0.0, 0.0], &[0, 1]).unwrap();
        assert!((l.loss - LN2).abs() < 1e-12);

        assert!(matches!(
            bce_multilabel_loss(&[0.0], &[]),
            Err(TensorError::EmptyTargetSet)
        ));
    }

    #[test]
    fn kl_examples() {
        let l = kl_divergence_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((l.loss - LN2).abs() < 1e-12);

        let logits = [0.3, -1.2, 2.0];
        let q = softmax(&logits);
        let l = kl_divergence_loss(&logits, &q).unwrap();
        assert!(l.loss.abs() < 1e-12);

        let l = kl_divergence_loss(&[3f64.ln(), 0.0], &[0.5, 0.5]).unwrap();
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((l.loss - expect).abs() < 1e-12);
        assert!((l.loss - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn ce_equals_kl_to_onehot() {
        let logits = [0.7, -0.3, 1.1, 0.0, -2.0];
        for target in 0..logits.len() {
            let mut onehot = vec![0.0; logits.len()];
            onehot[target] = 1.0;
            let ce = cross_entropy_loss(&logits, target).unwrap();
            let kl = kl_divergence_loss(&logits, &onehot).unwrap();
            assert!((ce.loss - kl.loss).abs() < 1e-9);
            for (a, b) in ce.grad.iter().zip(&kl.grad) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_grad_is_fixed_point_from_init() {
        let mut store = ParamStore::new(1);
        store.init_with("w", &[2], vec![1.0, -2.0]);
        let grads = store.zero_grads();
        optimizer_step(&mut store, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.value(0), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(1);
        store.init_with("w", &[1], vec![1.0]);
        let mut grads = store.zero_grads();
        grads.grad_mut(0)[0] = 1.0;
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        optimizer_step(&mut store, &grads, &config).unwrap();
        assert!((store.value(0)[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = rng::stream(9, "init");
            let mut store = ParamStore::new(9);
            store.init_matrix("w", &[4, 3], 4, 3, &mut rng);
            let mut grads = store.zero_grads();
            for step in 0..5 {
                for (i, g) in grads.grad_mut(0).iter_mut().enumerate() {
                    *g = ((i + step) as f64 * 0.01).sin();
                }
                optimizer_step(&mut store, &grads, &AdamConfig::default()).unwrap();
            }
            store
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let abits: Vec<u64> = a.value(0).iter().map(|x| x.to_bits()).collect();
        let bbits: Vec<u64> = b.value(0).iter().map(|x| x.to_bits()).collect();
        assert_eq!(abits, bbits);
    }

    #[test]
    fn adam_rejects_nan_grads() {
        let mut store = ParamStore::new(1);
        store.init_with("w", &[1], vec![1.0]);
        let mut grads = store.zero_grads();
        grads.grad_mut(0)[0] = f64::NAN;
        let err = optimizer_step(&mut store, &grads, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn gradient_check_quadratic() {
        let mut x = vec![3.0];
        let analytic = vec![6.0];
        let err = gradient_check(|x| x[0] * x[0], &mut x, &analytic, 5, 1e-4, 0);
        assert!(err < 1e-8, "rel err {err}");
    }

    fn random_logits(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, "logits");
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn gradient_check_losses() {
        for dim in [5usize, 17] {
            let mut logits = random_logits(dim, dim as u64);
            let ce = cross_entropy_loss(&logits, 2).unwrap();
            let err = gradient_check(
                |x| cross_entropy_loss(x, 2).unwrap().loss,
                &mut logits,
                &ce.grad,
                50,
                1e-4,
                7,
            );
            assert!(err < 1e-4, "ce dim {dim}: {err}");

            let targets: Vec<usize> = (0..dim).step_by(3).collect();
            let mut logits = random_logits(dim, dim as u64 + 1);
            let bce = bce_multilabel_loss(&logits, &targets).unwrap();
            let err = gradient_check(
                |x| bce_multilabel_loss(x, &targets).unwrap().loss,
                &mut logits,
                &bce.grad,
                50,
                1e-4,
                8,
            );
            assert!(err < 1e-4, "bce dim {dim}: {err}");

            let mut logits = random_logits(dim, dim as u64 + 2);
            let target = softmax(&random_logits(dim, dim as u64 + 3));
            let kl = kl_divergence_loss(&logits, &target).unwrap();
            let err = gradient_check(
                |x| kl_divergence_loss(x, &target).unwrap().loss,
                &mut logits,
                &kl.grad,
                50,
                1e-4,
                9,
            );
            assert!(err < 1e-4, "kl dim {dim}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut rng = rng::stream(3, "init");
        let mut store = ParamStore::new(3);
        store.init_matrix("trunk.w1", &[8, 4], 8, 4, &mut rng);
        store.init_zeros("trunk.b1", &[4]);
        let mut grads = store.zero_grads();
        grads.grad_mut(0).iter_mut().for_each(|g| *g = 0.25);
        optimizer_step(&mut store, &grads, &AdamConfig::default()).unwrap();

        let ck = Checkpoint::new(store.clone(), "abc123", 3);
        let loaded = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(loaded.store, store);
        for (a, b) in loaded.store.params().iter().zip(store.params()) {
            let ab: Vec<u64> = a.value.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.value.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(loaded.config_hash, "abc123");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_positive(logits in proptest::collection::vec(-40.0f64..40.0, 1..20)) {
            let q = softmax(&logits);
            let sum: f64 = q.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&p| p > 0.0));
        }
    }
}
