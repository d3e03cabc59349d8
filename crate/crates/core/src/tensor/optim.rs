//! Parameter storage and the AdamW optimizer.

use crate::scalar::Scalar;

use super::{Tape, Tensor, TensorError, Var};

/// One named trainable tensor. `decay` marks whether decoupled weight decay
/// applies: true for weight matrices, false for biases, layer-norm
/// parameters, and every embedding/bias table.
#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub decay: bool,
}

/// Flat, ordered collection of parameters. The order is the single source
/// of truth: tape binding, gradient collection, optimizer moments, and
/// checkpoint records all follow it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    /// Adds a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>, decay: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            decay,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<F> {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.entries[idx].tensor
    }

    pub fn total_floats(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    /// Registers every parameter on a tape, in store order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.entries.iter().map(|e| tape.param(&e.tensor)).collect()
    }

    /// Collects gradients after `backward`, aligned with store order.
    pub fn collect_grads(&self, tape: &Tape<F>, vars: &[Var]) -> Vec<Vec<F>> {
        vars.iter()
            .map(|&v| {
                tape.grad_of(v)
                    .expect("backward materializes param grads")
                    .to_vec()
            })
            .collect()
    }
}

/// AdamW hyperparameters. Decay is decoupled from the adaptive step and
/// skipped entirely for entries flagged `decay: false`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
    pub config: AdamWConfig,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig) -> Self {
        OptimizerState {
            step: 0,
            first: params
                .entries()
                .iter()
                .map(|e| vec![F::zero(); e.tensor.numel()])
                .collect(),
            second: params
                .entries()
                .iter()
                .map(|e| vec![F::zero(); e.tensor.numel()])
                .collect(),
            config,
        }
    }
}

/// One AdamW update with bias-corrected moments.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &[Vec<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<(), TensorError> {
    if grads.len() != params.len() {
        return Err(TensorError::Argument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let beta1 = F::from_f64(cfg.beta1);
    let beta2 = F::from_f64(cfg.beta2);
    let one_m_b1 = F::one() - beta1;
    let one_m_b2 = F::one() - beta2;
    let bias1 = F::one() - F::from_f64(cfg.beta1).powi(t);
    let bias2 = F::one() - F::from_f64(cfg.beta2).powi(t);
    let eps = F::from_f64(cfg.eps);
    let lr_f = F::from_f64(lr);

    for (i, grad) in grads.iter().enumerate() {
        let entry = &mut params.entries[i];
        if grad.len() != entry.tensor.numel() {
            return Err(TensorError::Shape(format!(
                "gradient for {} has {} elements, parameter {}",
                entry.name,
                grad.len(),
                entry.tensor.numel()
            )));
        }
        let decay = if entry.decay {
            F::from_f64(cfg.weight_decay)
        } else {
            F::zero()
        };
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((p, &g), m), v) in entry
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + one_m_b1 * g;
            *v = beta2 * *v + one_m_b2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr_f * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
