//! Peak-memory model: an analytic estimate of the tape-resident floats of
//! one training step, and the instrumented measurement it is validated
//! against.
//!
//! "Memory" here is the peak number of simultaneously live tape floats
//! (data buffers plus gradient buffers) during one forward+backward pass,
//! a platform-independent stand-in for process memory. Scratch buffers
//! inside kernels are not tape-resident and are excluded on both sides.
//!
//! The estimate mirrors the engine's retention policy:
//!
//! * attention: exactly one `rows x rows` weights buffer per head per layer
//!   is retained (logits are row-scratch), so the attention term is
//!   `heads * (enc_layers * n_o^2 + dec_layers * n^2)`;
//! * bias: each stack keeps one `heads x rows x rows` bias tensor whose
//!   gradient is also live through most of the backward sweep
//!   ([`BIAS_UNITS`] buffers of that size);
//! * activations: each layer retains [`ACT_UNITS_PER_LAYER`] `d`-wide
//!   buffers per row (ln1, q/k/v, head outputs, concat, projection,
//!   residuals, ln2, and the 4d-wide feed-forward chain), plus
//!   [`IO_UNITS_PER_STACK`] per row of featurizer/centrality/head plumbing
//!   per stack;
//! * parameters: every parameter is cloned onto the tape and ends backward
//!   with a materialized gradient, contributing twice its float count.

use thiserror::Error;

use crate::graph::{EncodedGraph, Graph};
use crate::model::{
    mask_count, pretrain_step_with, sample_mask, GmaeConfig, ModelError, ModelParams,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum MemError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which training step is being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MemMode {
    /// Masked step: deep encoder over visible nodes, shallow decoder over
    /// all positions.
    Gmae,
    /// Conventional baseline: the same-depth encoder over the full graph
    /// (no masking, no decoder).
    FullEncoder,
}

impl MemMode {
    pub fn label(&self) -> &'static str {
        match self {
            MemMode::Gmae => "gmae",
            MemMode::FullEncoder => "full",
        }
    }
}

/// Tape-resident `d`-wide activation buffers per row per transformer layer.
pub const ACT_UNITS_PER_LAYER: f64 = 24.0;
/// Featurizer/centrality/compose/head plumbing per row per stack, in
/// `d`-wide buffer units.
pub const IO_UNITS_PER_STACK: f64 = 8.0;
/// Bias-sized buffers live at peak per stack: the bias tensor itself plus
/// its gradient during the backward sweep.
pub const BIAS_UNITS: f64 = 2.0;

/// Analytic per-term float counts for one step at graph size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemEstimate {
    pub cfg: GmaeConfig,
    pub mode: MemMode,
    pub n: usize,
    /// Encoder rows: `n` minus the mask count for [`MemMode::Gmae`], `n`
    /// for the baseline.
    pub n_visible: usize,
    pub enc_attention: f64,
    pub dec_attention: f64,
    pub enc_activation: f64,
    pub dec_activation: f64,
    pub enc_bias: f64,
    pub dec_bias: f64,
    pub parameters: f64,
    pub total: f64,
}

impl MemEstimate {
    pub fn attention_floats(&self) -> f64 {
        self.enc_attention + self.dec_attention
    }

    pub fn activation_floats(&self) -> f64 {
        self.enc_activation + self.dec_activation
    }

    pub fn bias_floats(&self) -> f64 {
        self.enc_bias + self.dec_bias
    }
}

/// Analytic estimate of the peak live floats of one step. `num_node_classes`
/// sizes the featurizer and reconstruction head (the estimator assumes
/// label-valued features and no edge tables, matching the synthetic graphs
/// the profiler runs on).
pub fn estimate_peak_floats(
    n: usize,
    cfg: &GmaeConfig,
    mode: MemMode,
    num_node_classes: usize,
) -> MemEstimate {
    let d = cfg.hidden as f64;
    let h = cfg.heads as f64;
    let classes = num_node_classes as f64;
    let (n_vis, enc_layers, dec_layers) = match mode {
        MemMode::Gmae => (
            n - mask_count(n, cfg.mask_ratio),
            cfg.enc_layers,
            cfg.dec_layers,
        ),
        MemMode::FullEncoder => (n, cfg.enc_layers, 0),
    };
    let n_o = n_vis as f64;
    let n_f = n as f64;

    let enc_attention = h * enc_layers as f64 * n_o * n_o;
    let dec_attention = h * dec_layers as f64 * n_f * n_f;
    let enc_bias = BIAS_UNITS * h * n_o * n_o;
    let dec_bias = if dec_layers > 0 {
        BIAS_UNITS * h * n_f * n_f
    } else {
        0.0
    };

    // Per-stack activations: layer-retained buffers plus input/output
    // plumbing; the reconstruction head contributes class-wide rows on the
    // stack that carries it (decoder, or the encoder in baseline mode).
    let head_rows = 4.0 * n_f * classes;
    let enc_activation = d * enc_layers as f64 * ACT_UNITS_PER_LAYER * n_o
        + IO_UNITS_PER_STACK * d * n_o
        + if dec_layers == 0 { head_rows } else { 0.0 };
    let dec_activation = if dec_layers > 0 {
        d * dec_layers as f64 * ACT_UNITS_PER_LAYER * n_f + IO_UNITS_PER_STACK * d * n_f + head_rows
    } else {
        0.0
    };

    let param_floats = parameter_floats(cfg, num_node_classes) as f64;
    let parameters = 2.0 * param_floats;

    let total = enc_attention
        + dec_attention
        + enc_bias
        + dec_bias
        + enc_activation
        + dec_activation
        + parameters;
    MemEstimate {
        cfg: *cfg,
        mode,
        n,
        n_visible: n_vis,
        enc_attention,
        dec_attention,
        enc_activation,
        dec_activation,
        enc_bias,
        dec_bias,
        parameters,
        total,
    }
}

/// Float count of all parameters for a label-valued schema without edge
/// tables (featurizer + both stacks + tables + mask token + head).
pub fn parameter_floats(cfg: &GmaeConfig, num_node_classes: usize) -> u64 {
    let d = cfg.hidden as u64;
    let d_ff = cfg.d_ff() as u64;
    let heads = cfg.heads as u64;
    let d_head = d / heads;
    let per_layer = 3 * heads * d * d_head  // q, k, v projections
        + d * d                             // output projection
        + d * d_ff + d_ff                   // ffn in + bias
        + d_ff * d + d                      // ffn out + bias
        + 4 * d; // two layer norms
    let tables = (cfg.max_degree as u64 + 1) * d + heads * (cfg.max_spd as u64 + 2);
    let classes = num_node_classes as u64;
    classes * d                                   // featurizer
        + (cfg.enc_layers as u64 + cfg.dec_layers as u64) * per_layer
        + 2 * tables
        + d                                       // mask token
        + d * classes + classes // reconstruction head
}

/// Runs one instrumented step and returns the peak live tape floats.
/// `counter_enabled: false` exercises the disabled-counter error path.
pub fn measure_peak_floats<F: Scalar>(
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    mode: MemMode,
    seed: u64,
    counter_enabled: bool,
) -> Result<u64, MemError> {
    let mut tape = if counter_enabled {
        Tape::new()
    } else {
        Tape::without_counter()
    };
    let mut rng = rng::seeded(seed);
    match mode {
        MemMode::Gmae => {
            let plan = sample_mask(g.num_nodes, params.cfg.mask_ratio, &mut rng)?;
            pretrain_step_with(&mut tape, params, g, enc, &plan, &mut rng)?;
        }
        MemMode::FullEncoder => {
            // Full-graph autoencoding step at encoder depth: every node
            // visible, reconstruction loss over all nodes, no decoder.
            let all: Vec<usize> = (0..g.num_nodes).collect();
            let vars = params.store.bind(&mut tape);
            let x = crate::model::encode_on(&mut tape, &vars, params, g, enc, &all, None, None)?;
            let logits = tape.matmul(x, vars[params.head.weight])?;
            let logits = tape.add(logits, vars[params.head.bias])?;
            let labels = g
                .node_labels
                .as_ref()
                .ok_or_else(|| ModelError::Config("baseline step needs node labels".into()))?;
            let loss = tape.loss_cross_entropy(logits, labels)?;
            tape.backward(loss)?;
        }
    }
    Ok(tape.peak_live_floats()?)
}

/// Convenience for the profiler and tests: estimate vs. measurement on a
/// fresh Erdős–Rényi graph of size `n`.
pub fn profile_point<F: Scalar>(
    cfg: &GmaeConfig,
    n: usize,
    mode: MemMode,
    seed: u64,
) -> Result<(MemEstimate, u64), MemError> {
    const NODE_CLASSES: usize = 4;
    const EDGE_PROB: f64 = 0.1;
    let dataset = crate::graph::synth::er_dataset(seed, n, EDGE_PROB, NODE_CLASSES);
    let g = &dataset.graphs[0];
    let enc = crate::graph::compute_encodings(g, cfg.max_spd);
    let schema = crate::model::FeatureSchema::of(&dataset);
    let params: ModelParams<F> = ModelParams::init(cfg, &schema, &mut rng::seeded(seed))?;
    let estimate = estimate_peak_floats(n, cfg, mode, NODE_CLASSES);
    let measured = measure_peak_floats(&params, g, &enc, mode, seed, true)?;
    Ok((estimate, measured))
}

///2x in n should give roughly 4x in peak when attention dominates.
pub fn scaling_ratio(small: u64, large: u64) -> f64 {
    large as f64 / small as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attention_cfg(enc: usize, dec: usize, hidden: usize, r: f64) -> GmaeConfig {
        GmaeConfig {
            enc_layers: enc,
            dec_layers: dec,
            hidden,
            heads: 8,
            mask_ratio: r,
            max_spd: 10,
            max_degree: 32,
            ff_multiplier: 4,
            dropout: 0.0,
        }
    }

    #[test]
    fn baseline_mode_reduces_to_full_transformer_estimate() {
        let cfg = attention_cfg(12, 2, 16, 0.7);
        let est = estimate_peak_floats(100, &cfg, MemMode::FullEncoder, 4);
        assert_eq!(est.n_visible, 100);
        assert_eq!(est.dec_attention, 0.0);
        assert_eq!(est.dec_activation, 0.0);
        assert_eq!(est.dec_bias, 0.0);
        let expected_attn = 8.0 * 12.0 * 100.0 * 100.0;
        assert_eq!(est.enc_attention, expected_attn);
    }

    #[test]
    fn asymptotic_attention_ratio_approaches_point_257() {
        let cfg = attention_cfg(12, 2, 16, 0.7);
        let n = 10_000;
        let gmae = estimate_peak_floats(n, &cfg, MemMode::Gmae, 4);
        let full = estimate_peak_floats(n, &cfg, MemMode::FullEncoder, 4);
        let ratio = gmae.attention_floats() / full.attention_floats();
        // (12 * 0.09 + 2) / 12
        assert!((ratio - 0.2567).abs() < 0.002, "ratio {ratio}");
    }

    #[test]
    fn estimate_is_monotone_in_n() {
        let cfg = attention_cfg(4, 2, 16, 0.5);
        let mut prev = 0.0;
        for n in 2..200 {
            let est = estimate_peak_floats(n, &cfg, MemMode::Gmae, 4);
            assert!(est.total > prev, "not monotone at n = {n}");
            prev = est.total;
        }
    }

    #[test]
    fn totals_are_the_sum_of_terms() {
        let cfg = attention_cfg(3, 1, 16, 0.5);
        let est = estimate_peak_floats(40, &cfg, MemMode::Gmae, 4);
        let sum =
            est.attention_floats() + est.activation_floats() + est.bias_floats() + est.parameters;
        assert!((est.total - sum).abs() < 1e-9);
        assert!(est.enc_attention >= 0.0 && est.parameters > 0.0);
    }

    #[test]
    fn measurement_is_deterministic() {
        let cfg = attention_cfg(2, 1, 16, 0.5);
        let (_, a) = profile_point::<f64>(&cfg, 24, MemMode::Gmae, 3).unwrap();
        let (_, b) = profile_point::<f64>(&cfg, 24, MemMode::Gmae, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_counter_is_a_state_error() {
        let cfg = attention_cfg(1, 1, 8, 0.5);
        let dataset = crate::graph::synth::er_dataset(1, 10, 0.2, 4);
        let g = &dataset.graphs[0];
        let enc = crate::graph::compute_encodings(g, cfg.max_spd);
        let schema = crate::model::FeatureSchema::of(&dataset);
        let params: ModelParams<f64> =
            ModelParams::init(&cfg, &schema, &mut rng::seeded(0)).unwrap();
        let err = measure_peak_floats(&params, g, &enc, MemMode::Gmae, 0, false).unwrap_err();
        assert!(matches!(err, MemError::Tensor(TensorError::State(_))));
    }

    #[test]
    fn doubling_n_roughly_quadruples_attention_dominated_peak() {
        // Small hidden width keeps parameters negligible, so the quadratic
        // attention share dominates from n = 64 up.
        let cfg = attention_cfg(12, 2, 8, 0.5);
        let measure = |n: usize| -> u64 {
            let (_, measured) = profile_point::<f64>(&cfg, n, MemMode::FullEncoder, 11).unwrap();
            measured
        };
        let m64 = measure(64);
        let m128 = measure(128);
        let m256 = measure(256);
        for (small, large) in [(m64, m128), (m128, m256)] {
            let ratio = scaling_ratio(small, large);
            assert!(
                (3.2..=4.8).contains(&ratio),
                "scaling ratio {ratio} outside [3.2, 4.8]"
            );
        }
    }

    #[test]
    fn parameter_count_matches_store() {
        let cfg = attention_cfg(2, 1, 16, 0.5);
        let dataset = crate::graph::synth::er_dataset(2, 12, 0.2, 4);
        let schema = crate::model::FeatureSchema::of(&dataset);
        let params: ModelParams<f64> =
            ModelParams::init(&cfg, &schema, &mut rng::seeded(0)).unwrap();
        assert_eq!(params.store.total_floats(), parameter_floats(&cfg, 4));
    }
}
