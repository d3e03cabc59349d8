//! The masked graph autoencoder: mask sampling, visible-subgraph encoding,
//! mask-token insertion, shallow decoding, and the masked-node
//! reconstruction objective.
//!
//! Masking applies to node features only, never to the structure: degrees,
//! distances, and stored paths always come from the full graph, and the
//! encoder attends over the visible-by-visible submatrix of the full-graph
//! bias. The decoder sees all positions, with the shared learnable mask
//! token standing in for every masked node, and reconstructs the raw input
//! features; the loss reads masked rows only.

use thiserror::Error;

use crate::graph::{EncodedGraph, Graph, GraphDataset, NodeFeatures};
use crate::layer::{
    build_bias_subset, centrality_encode, transformer_layer, Dropout, EncodingTables, LayerParams,
};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmaeConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub max_spd: u32,
    pub max_degree: usize,
    pub ff_multiplier: usize,
    pub dropout: f64,
}

impl Default for GmaeConfig {
    fn default() -> Self {
        GmaeConfig {
            enc_layers: 12,
            dec_layers: 2,
            hidden: 80,
            heads: 8,
            mask_ratio: 0.5,
            max_spd: 20,
            max_degree: 64,
            ff_multiplier: 4,
            dropout: 0.0,
        }
    }
}

impl GmaeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ModelError::Config(
                "encoder and decoder need at least one layer each".into(),
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "hidden dim {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(ModelError::Config(format!(
                "mask ratio {} must lie strictly between 0 and 1",
                self.mask_ratio
            )));
        }
        if self.max_spd == 0 || self.ff_multiplier == 0 {
            return Err(ModelError::Config(
                "max_spd and ff_multiplier must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.hidden * self.ff_multiplier
    }
}

/// Number of masked nodes for a graph of `n` nodes at ratio `r`:
/// `round(r n)` (half away from zero), clamped to `1..=n-1`.
pub fn mask_count(n: usize, r: f64) -> usize {
    ((r * n as f64).round() as usize).clamp(1, n - 1)
}

/// Per-graph partition into visible and masked node sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from the sorted masked set; the visible set is the
    /// complement. Both sets must end up non-empty.
    pub fn from_masked(n: usize, masked: Vec<usize>) -> Result<Self, ModelError> {
        if masked.is_empty() || masked.len() >= n {
            return Err(ModelError::Argument(
                "a mask plan needs at least one masked and one visible node".into(),
            ));
        }
        if masked.windows(2).any(|w| w[0] >= w[1]) || masked.iter().any(|&i| i >= n) {
            return Err(ModelError::Argument(
                "masked indices must be sorted, unique, and < n".into(),
            ));
        }
        let mut is_masked = vec![false; n];
        for &i in &masked {
            is_masked[i] = true;
        }
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        Ok(MaskPlan { visible, masked })
    }
}

/// Uniform sample (without replacement) of the masked set.
pub fn sample_mask(n: usize, r: f64, rng: &mut Prng) -> Result<MaskPlan, ModelError> {
    if n < 2 {
        return Err(ModelError::Argument(format!(
            "cannot mask a {n}-node graph: need both a visible and a masked node"
        )));
    }
    let k = mask_count(n, r);
    MaskPlan::from_masked(n, rng::sample_indices(rng, n, k))
}

/// How node features enter the model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Featurizer {
    /// Categorical labels via an embedding table.
    Embedding { table: usize },
    /// Float attribute vectors via a learned linear projection.
    Projection { weight: usize },
}

/// Final linear map to reconstruction targets (label logits or attributes).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OutputHead {
    pub weight: usize,
    pub bias: usize,
    pub out_dim: usize,
}

/// The dataset-dependent dimensions a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSchema {
    pub node_features: NodeFeatures,
    pub num_edge_classes: usize,
}

impl FeatureSchema {
    pub fn of(dataset: &GraphDataset) -> Self {
        FeatureSchema {
            node_features: dataset.node_features,
            num_edge_classes: dataset.num_edge_classes,
        }
    }
}

/// All learnable state of encoder + decoder, flat in `store` with the
/// layout structs indexing into it.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub store: ParamStore<F>,
    pub featurizer: Featurizer,
    pub encoder: Vec<LayerParams>,
    pub enc_tables: EncodingTables,
    pub decoder: Vec<LayerParams>,
    pub dec_tables: EncodingTables,
    pub mask_token: usize,
    pub head: OutputHead,
    pub cfg: GmaeConfig,
    pub schema: FeatureSchema,
}

fn normal_tensor<F: Scalar>(rng: &mut Prng, shape: Vec<usize>) -> Tensor<F> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng::trunc_normal(rng, 0.02)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Input rows for the given nodes under a featurizer.
fn featurize_on<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    featurizer: &Featurizer,
    g: &Graph,
    nodes: &[usize],
) -> Result<Var, ModelError> {
    match (featurizer, &g.node_labels, &g.node_attributes) {
        (Featurizer::Embedding { table }, Some(labels), _) => {
            let ids: Vec<usize> = nodes.iter().map(|&i| labels[i]).collect();
            Ok(tape.embedding_lookup(vars[*table], &ids)?)
        }
        (Featurizer::Projection { weight }, _, Some(attrs)) => {
            let dim = attrs.first().map_or(0, Vec::len);
            let rows: Vec<F> = nodes
                .iter()
                .flat_map(|&i| attrs[i].iter().map(|&v| F::from_f64(v)))
                .collect();
            let x = tape.constant(&Tensor::new(vec![nodes.len(), dim], rows)?);
            Ok(tape.matmul(x, vars[*weight])?)
        }
        _ => Err(ModelError::Config(
            "graph features do not match the model schema".into(),
        )),
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters for `cfg` and `schema`. The same seed always yields
    /// bit-identical parameters (names included), which is what checkpoint
    /// loading relies on to rebuild the layout.
    pub fn init(
        cfg: &GmaeConfig,
        schema: &FeatureSchema,
        rng: &mut Prng,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut store = ParamStore::new();

        let (featurizer, out_dim) = match schema.node_features {
            NodeFeatures::Labels { num_classes } => {
                if num_classes == 0 {
                    return Err(ModelError::Config(
                        "label-valued schema with an empty vocabulary".into(),
                    ));
                }
                let table = store.push(
                    "featurizer.labels",
                    normal_tensor(rng, vec![num_classes, d]),
                    false,
                );
                (Featurizer::Embedding { table }, num_classes)
            }
            NodeFeatures::Attributes { dim } => {
                if dim == 0 {
                    return Err(ModelError::Config(
                        "attribute-valued schema with zero dimensions".into(),
                    ));
                }
                let weight = store.push("featurizer.proj", normal_tensor(rng, vec![dim, d]), true);
                (Featurizer::Projection { weight }, dim)
            }
        };

        let encoder = (0..cfg.enc_layers)
            .map(|l| {
                LayerParams::init(
                    &mut store,
                    rng,
                    &format!("enc.{l}"),
                    d,
                    cfg.heads,
                    cfg.d_ff(),
                )
            })
            .collect();
        let enc_tables = EncodingTables::init(
            &mut store,
            rng,
            "enc.tables",
            d,
            cfg.heads,
            cfg.max_degree,
            cfg.max_spd,
            schema.num_edge_classes,
        );
        let decoder = (0..cfg.dec_layers)
            .map(|l| {
                LayerParams::init(
                    &mut store,
                    rng,
                    &format!("dec.{l}"),
                    d,
                    cfg.heads,
                    cfg.d_ff(),
                )
            })
            .collect();
        let dec_tables = EncodingTables::init(
            &mut store,
            rng,
            "dec.tables",
            d,
            cfg.heads,
            cfg.max_degree,
            cfg.max_spd,
            schema.num_edge_classes,
        );
        let mask_token = store.push("mask_token", normal_tensor(rng, vec![1, d]), false);
        let head = OutputHead {
            weight: store.push("head.weight", normal_tensor(rng, vec![d, out_dim]), true),
            bias: store.push("head.bias", Tensor::zeros(vec![out_dim]), false),
            out_dim,
        };

        Ok(ModelParams {
            store,
            featurizer,
            encoder,
            enc_tables,
            decoder,
            dec_tables,
            mask_token,
            head,
            cfg: *cfg,
            schema: *schema,
        })
    }

    /// Input rows for the given nodes: embedding rows for labels, projected
    /// attribute vectors otherwise.
    pub fn featurize(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        g: &Graph,
        nodes: &[usize],
    ) -> Result<Var, ModelError> {
        featurize_on(tape, vars, &self.featurizer, g, nodes)
    }
}

/// Supervised objective attached after pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    /// Linear `d -> 1` head trained with L1 loss (mean absolute error).
    Regression,
    /// Linear `d -> C` head trained with cross-entropy.
    Classification { num_classes: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { num_classes } => *num_classes,
        }
    }
}

fn remap_index<F: Scalar>(old: &ParamStore<F>, new: &mut ParamStore<F>, idx: usize) -> usize {
    let e = &old.entries()[idx];
    new.push(e.name.clone(), e.tensor.clone(), e.decay)
}

impl LayerParams {
    fn remap<F: Scalar>(&self, old: &ParamStore<F>, new: &mut ParamStore<F>) -> LayerParams {
        LayerParams {
            w_q: self.w_q.iter().map(|&i| remap_index(old, new, i)).collect(),
            w_k: self.w_k.iter().map(|&i| remap_index(old, new, i)).collect(),
            w_v: self.w_v.iter().map(|&i| remap_index(old, new, i)).collect(),
            w_o: remap_index(old, new, self.w_o),
            w1: remap_index(old, new, self.w1),
            b1: remap_index(old, new, self.b1),
            w2: remap_index(old, new, self.w2),
            b2: remap_index(old, new, self.b2),
            ln1_gain: remap_index(old, new, self.ln1_gain),
            ln1_bias: remap_index(old, new, self.ln1_bias),
            ln2_gain: remap_index(old, new, self.ln2_gain),
            ln2_bias: remap_index(old, new, self.ln2_bias),
            heads: self.heads,
            d_head: self.d_head,
        }
    }
}

impl EncodingTables {
    fn remap<F: Scalar>(&self, old: &ParamStore<F>, new: &mut ParamStore<F>) -> EncodingTables {
        EncodingTables {
            centrality: remap_index(old, new, self.centrality),
            spatial: remap_index(old, new, self.spatial),
            edge: self.edge.as_ref().map(|e| crate::layer::EdgeTables {
                edge_types: remap_index(old, new, e.edge_types),
                hop_weights: remap_index(old, new, e.hop_weights),
            }),
            max_degree: self.max_degree,
            max_spd: self.max_spd,
        }
    }
}

/// Encoder plus a task head; what fine-tuning trains after the decoder is
/// discarded. Prediction is mean-pooled node embeddings through a linear
/// head.
#[derive(Debug, Clone)]
pub struct EncoderModel<F> {
    pub store: ParamStore<F>,
    pub featurizer: Featurizer,
    pub encoder: Vec<LayerParams>,
    pub enc_tables: EncodingTables,
    pub head: OutputHead,
    pub task: TaskKind,
    pub cfg: GmaeConfig,
    pub schema: FeatureSchema,
}

impl<F: Scalar> ModelParams<F> {
    /// Drops the decoder (and the reconstruction head) and attaches a fresh
    /// task head over the pooled encoder output.
    pub fn extract_encoder(&self, task: TaskKind, rng: &mut Prng) -> EncoderModel<F> {
        let mut store = ParamStore::new();
        let featurizer = match &self.featurizer {
            Featurizer::Embedding { table } => Featurizer::Embedding {
                table: remap_index(&self.store, &mut store, *table),
            },
            Featurizer::Projection { weight } => Featurizer::Projection {
                weight: remap_index(&self.store, &mut store, *weight),
            },
        };
        let encoder: Vec<LayerParams> = self
            .encoder
            .iter()
            .map(|l| l.remap(&self.store, &mut store))
            .collect();
        let enc_tables = self.enc_tables.remap(&self.store, &mut store);
        let d = self.cfg.hidden;
        let out_dim = task.out_dim();
        let head = OutputHead {
            weight: store.push(
                "task_head.weight",
                normal_tensor(rng, vec![d, out_dim]),
                true,
            ),
            bias: store.push("task_head.bias", Tensor::zeros(vec![out_dim]), false),
            out_dim,
        };
        EncoderModel {
            store,
            featurizer,
            encoder,
            enc_tables,
            head,
            task,
            cfg: self.cfg,
            schema: self.schema,
        }
    }
}

impl<F: Scalar> EncoderModel<F> {
    /// Pooled prediction for one graph on an existing tape: whole graph
    /// through the encoder, mean pooling over real rows, linear head.
    /// Returns a `1 x out_dim` row.
    pub fn predict_on(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        g: &Graph,
        enc: &EncodedGraph,
        pad_to: Option<usize>,
    ) -> Result<Var, ModelError> {
        let all: Vec<usize> = (0..g.num_nodes).collect();
        let x = featurize_on(tape, vars, &self.featurizer, g, &all)?;
        let x = centrality_encode(tape, x, &enc.degrees, &self.enc_tables, vars)?;
        let bias = build_bias_subset(
            tape,
            enc,
            g.edge_labels.as_deref(),
            &self.enc_tables,
            vars,
            None,
        )?;
        let (mut h, bias) = match pad_to {
            Some(n_total) => (tape.pad_rows(x, n_total)?, tape.pad_bias(bias, n_total)?),
            None => (x, bias),
        };
        for layer in &self.encoder {
            h = transformer_layer(tape, h, layer, vars, bias, None)?;
        }
        let h = if pad_to.is_some() {
            tape.gather_rows(h, &all)?
        } else {
            h
        };
        let pooled = tape.mean_rows(h)?;
        let out = tape.matmul(pooled, vars[self.head.weight])?;
        Ok(tape.add(out, vars[self.head.bias])?)
    }

    /// Materialized prediction for one graph.
    pub fn predict(&self, g: &Graph, enc: &EncodedGraph) -> Result<Tensor<F>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let out = self.predict_on(&mut tape, &vars, g, enc, None)?;
        Ok(tape.to_tensor(out))
    }
}

/// Runs one stack (encoder or decoder): centrality encoding, optional
/// padding, then the transformer layers over the given bias.
#[allow(clippy::too_many_arguments)]
fn run_stack<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    layers: &[LayerParams],
    tables: &EncodingTables,
    mut x: Var,
    degrees: &[usize],
    bias: Var,
    pad_to: Option<usize>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, ModelError> {
    x = centrality_encode(tape, x, degrees, tables, vars)?;
    let (x, bias) = match pad_to {
        Some(n_total) => (tape.pad_rows(x, n_total)?, tape.pad_bias(bias, n_total)?),
        None => (x, bias),
    };
    let mut h = x;
    for layer in layers {
        h = transformer_layer(tape, h, layer, vars, bias, dropout.as_deref_mut())?;
    }
    Ok(h)
}

/// Encoder over the visible nodes, on an existing tape. Returns rows in
/// visible order (padded to `pad_to` when given).
#[allow(clippy::too_many_arguments)]
pub fn encode_on<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    visible: &[usize],
    pad_to: Option<usize>,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, ModelError> {
    let x = params.featurize(tape, vars, g, visible)?;
    let degrees: Vec<usize> = visible.iter().map(|&i| enc.degrees[i]).collect();
    let bias = build_bias_subset(
        tape,
        enc,
        g.edge_labels.as_deref(),
        &params.enc_tables,
        vars,
        Some(visible),
    )?;
    run_stack(
        tape,
        vars,
        &params.encoder,
        &params.enc_tables,
        x,
        &degrees,
        bias,
        pad_to,
        dropout,
    )
}

/// Inserts the shared mask token at masked positions, restoring original
/// node order: row `i` is the encoder output when `i` is visible, a copy of
/// the mask token otherwise.
pub fn assemble_decoder_input<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    params: &ModelParams<F>,
    x_e: Var,
    plan: &MaskPlan,
) -> Result<Var, ModelError> {
    let n = plan.visible.len() + plan.masked.len();
    Ok(tape.compose_rows(x_e, vars[params.mask_token], &plan.visible, n)?)
}

/// Decoder over all positions followed by the reconstruction head.
#[allow(clippy::too_many_arguments)]
pub fn decode_on<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    x_e_prime: Var,
    pad_to: Option<usize>,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, ModelError> {
    let bias = build_bias_subset(
        tape,
        enc,
        g.edge_labels.as_deref(),
        &params.dec_tables,
        vars,
        None,
    )?;
    let h = run_stack(
        tape,
        vars,
        &params.decoder,
        &params.dec_tables,
        x_e_prime,
        &enc.degrees,
        bias,
        pad_to,
        dropout,
    )?;
    let logits = tape.matmul(h, vars[params.head.weight])?;
    Ok(tape.add(logits, vars[params.head.bias])?)
}

/// Reconstruction targets of the masked rows: class labels for categorical
/// features, flattened attribute vectors otherwise.
pub enum MaskedTargets<F> {
    Labels(Vec<usize>),
    Attributes(Vec<F>),
}

pub fn masked_targets<F: Scalar>(
    g: &Graph,
    masked: &[usize],
) -> Result<MaskedTargets<F>, ModelError> {
    if let Some(labels) = &g.node_labels {
        return Ok(MaskedTargets::Labels(
            masked.iter().map(|&i| labels[i]).collect(),
        ));
    }
    if let Some(attrs) = &g.node_attributes {
        return Ok(MaskedTargets::Attributes(
            masked
                .iter()
                .flat_map(|&i| attrs[i].iter().map(|&v| F::from_f64(v)))
                .collect(),
        ));
    }
    Err(ModelError::Config("graph carries no node features".into()))
}

/// Loss over masked rows only: cross-entropy on labels, mean squared error
/// on attributes. Predictions at visible rows do not enter at all, so their
/// gradient is exactly zero.
pub fn reconstruction_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    g: &Graph,
    plan: &MaskPlan,
) -> Result<Var, ModelError> {
    let masked_pred = tape.gather_rows(pred, &plan.masked)?;
    match masked_targets::<F>(g, &plan.masked)? {
        MaskedTargets::Labels(labels) => Ok(tape.loss_cross_entropy(masked_pred, &labels)?),
        MaskedTargets::Attributes(values) => Ok(tape.loss_mse(masked_pred, &values)?),
    }
}

/// Full pipeline for one graph on an existing tape:
/// encode visible, insert mask tokens, decode, masked-row loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[Var],
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    plan: &MaskPlan,
    pad_visible_to: Option<usize>,
    pad_full_to: Option<usize>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, ModelError> {
    let x_e = encode_on(
        tape,
        vars,
        params,
        g,
        enc,
        &plan.visible,
        pad_visible_to,
        dropout.as_deref_mut(),
    )?;
    // Padding of the encoder output is dropped before reassembly; the
    // decoder pads again to its own width.
    let x_e = if pad_visible_to.is_some() {
        tape.gather_rows(x_e, &(0..plan.visible.len()).collect::<Vec<_>>())?
    } else {
        x_e
    };
    let x_e_prime = assemble_decoder_input(tape, vars, params, x_e, plan)?;
    let pred = decode_on(tape, vars, params, g, enc, x_e_prime, pad_full_to, dropout)?;
    let pred = if pad_full_to.is_some() {
        tape.gather_rows(pred, &(0..g.num_nodes).collect::<Vec<_>>())?
    } else {
        pred
    };
    reconstruction_loss_on(tape, pred, g, plan)
}

/// Output of a standalone pretraining step.
pub struct StepOutput<F> {
    pub loss: f64,
    pub grads: Vec<Vec<F>>,
    pub peak_live_floats: u64,
}

/// One self-supervised step on a single graph: sample a mask, run the
/// pipeline, backpropagate. Pure given `(params, rng state)`.
pub fn pretrain_step<F: Scalar>(
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    rng: &mut Prng,
) -> Result<StepOutput<F>, ModelError> {
    let plan = sample_mask(g.num_nodes, params.cfg.mask_ratio, rng)?;
    let mut tape = Tape::new();
    pretrain_step_with(&mut tape, params, g, enc, &plan, rng)
}

/// As [`pretrain_step`] but with a caller-supplied tape and mask plan, so
/// instrumentation (and tests) can control both.
pub fn pretrain_step_with<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    plan: &MaskPlan,
    rng: &mut Prng,
) -> Result<StepOutput<F>, ModelError> {
    let vars = params.store.bind(tape);
    let mut dropout = Dropout {
        rate: params.cfg.dropout,
        rng,
    };
    let dropout_opt = (params.cfg.dropout > 0.0).then_some(&mut dropout);
    let loss = pretrain_loss_on(tape, &vars, params, g, enc, plan, None, None, dropout_opt)?;
    tape.backward(loss)?;
    Ok(StepOutput {
        loss: tape.scalar_value(loss).as_f64(),
        grads: params.store.collect_grads(tape, &vars),
        peak_live_floats: tape.peak_live_floats().unwrap_or(0),
    })
}

/// Encoder output for the given plan, original node order within the
/// visible set, as a materialized tensor.
pub fn encode<F: Scalar>(
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
    plan: &MaskPlan,
) -> Result<Tensor<F>, ModelError> {
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let out = encode_on(&mut tape, &vars, params, g, enc, &plan.visible, None, None)?;
    Ok(tape.to_tensor(out))
}

/// Inference path: no masking, whole graph through the encoder, graph
/// embedding by mean pooling. The decoder is not touched.
pub fn embed<F: Scalar>(
    params: &ModelParams<F>,
    g: &Graph,
    enc: &EncodedGraph,
) -> Result<(Tensor<F>, Tensor<F>), ModelError> {
    let all: Vec<usize> = (0..g.num_nodes).collect();
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let nodes = encode_on(&mut tape, &vars, params, g, enc, &all, None, None)?;
    let pooled = tape.mean_rows(nodes)?;
    Ok((tape.to_tensor(nodes), tape.to_tensor(pooled)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::compute_encodings;

    fn toy_graph() -> (Graph, EncodedGraph) {
        let g = Graph {
            num_nodes: 4,
            edges: vec![(0, 1), (1, 2), (2, 3)],
            node_labels: Some(vec![0, 1, 1, 0]),
            node_attributes: None,
            edge_labels: None,
            graph_target: None,
        };
        let enc = compute_encodings(&g, 10);
        (g, enc)
    }

    fn small_params(seed: u64) -> ModelParams<f64> {
        let cfg = GmaeConfig {
            enc_layers: 2,
            dec_layers: 1,
            hidden: 8,
            heads: 2,
            mask_ratio: 0.5,
            max_spd: 10,
            max_degree: 8,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        let schema = FeatureSchema {
            node_features: NodeFeatures::Labels { num_classes: 2 },
            num_edge_classes: 0,
        };
        ModelParams::init(&cfg, &schema, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn mask_count_follows_clamped_rounding() {
        assert_eq!(mask_count(4, 0.5), 2);
        assert_eq!(mask_count(2, 0.9), 1); // clamp to n-1
        assert_eq!(mask_count(2, 0.01), 1); // clamp to 1
        assert_eq!(mask_count(5, 0.5), 3); // round half up
        assert_eq!(mask_count(10, 0.35), 4);
    }

    #[test]
    fn sample_mask_rejects_tiny_graphs() {
        assert!(sample_mask(1, 0.5, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn sample_mask_partitions() {
        let mut rng = rng::seeded(5);
        for n in 2..30 {
            let plan = sample_mask(n, 0.5, &mut rng).unwrap();
            let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert_eq!(plan.masked.len(), mask_count(n, 0.5));
        }
    }

    #[test]
    fn encode_output_shape_is_visible_by_hidden() {
        let (g, enc) = toy_graph();
        let params = small_params(0);
        let plan = MaskPlan::from_masked(4, vec![2]).unwrap();
        let out = encode(&params, &g, &enc, &plan).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
    }

    #[test]
    fn identity_plan_encode_matches_embed_nodes() {
        let (g, enc) = toy_graph();
        let params = small_params(1);
        // "mask nothing" inference path: visible = all nodes
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let all: Vec<usize> = (0..4).collect();
        let enc_all = encode_on(&mut tape, &vars, &params, &g, &enc, &all, None, None).unwrap();
        let (nodes, _) = embed(&params, &g, &enc).unwrap();
        assert_eq!(tape.to_tensor(enc_all).data(), nodes.data());
    }

    #[test]
    fn embed_pools_node_embeddings() {
        let (g, enc) = toy_graph();
        let params = small_params(2);
        let (nodes, pooled) = embed(&params, &g, &enc).unwrap();
        for c in 0..8 {
            let mean = (0..4).map(|r| nodes.data()[r * 8 + c]).sum::<f64>() / 4.0;
            assert!((pooled.data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_graph_embeds_to_its_node_embedding() {
        let g = Graph {
            num_nodes: 1,
            edges: vec![],
            node_labels: Some(vec![1]),
            node_attributes: None,
            edge_labels: None,
            graph_target: None,
        };
        let enc = compute_encodings(&g, 10);
        let params = small_params(3);
        let (nodes, pooled) = embed(&params, &g, &enc).unwrap();
        assert_eq!(nodes.data(), pooled.data());
    }

    #[test]
    fn visible_rows_do_not_influence_loss() {
        let (g, enc) = toy_graph();
        let params = small_params(4);
        let plan = MaskPlan::from_masked(4, vec![1, 3]).unwrap();

        // Perturbing visible-row predictions must leave the loss unchanged;
        // checked through the gradient: d loss / d pred[visible] == 0.
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let x_e = encode_on(
            &mut tape,
            &vars,
            &params,
            &g,
            &enc,
            &plan.visible,
            None,
            None,
        )
        .unwrap();
        let x_e_prime = assemble_decoder_input(&mut tape, &vars, &params, x_e, &plan).unwrap();
        // Register predictions as a fresh param so we can read its gradient.
        let pred_raw =
            decode_on(&mut tape, &vars, &params, &g, &enc, x_e_prime, None, None).unwrap();
        let pred_tensor = tape.to_tensor(pred_raw);
        let pred = tape.param(&pred_tensor);
        let loss = reconstruction_loss_on(&mut tape, pred, &g, &plan).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad_of(pred).unwrap();
        for &v in &plan.visible {
            for c in 0..2 {
                assert_eq!(grad[v * 2 + c], 0.0, "visible row {v} has gradient");
            }
        }
        // Masked rows do carry gradient.
        assert!(plan
            .masked
            .iter()
            .any(|&m| { (0..2).any(|c| grad[m * 2 + c] != 0.0) }));
    }

    #[test]
    fn pretrain_step_is_deterministic_and_finite() {
        let (g, enc) = toy_graph();
        let params = small_params(5);
        let run = || {
            let mut rng = rng::seeded(99);
            pretrain_step(&params, &g, &enc, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.loss.is_finite() && a.loss > 0.0);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
        // Gradient flows back through the encoder outputs into every stack.
        for l in &params.encoder {
            assert!(a.grads[l.w_q[0]].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn zeroed_output_head_gives_all_zero_logits() {
        let (g, enc) = toy_graph();
        let mut params = small_params(8);
        params
            .store
            .tensor_mut(params.head.weight)
            .data_mut()
            .fill(0.0);
        params
            .store
            .tensor_mut(params.head.bias)
            .data_mut()
            .fill(0.0);
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let all: Vec<usize> = (0..4).collect();
        let x = encode_on(&mut tape, &vars, &params, &g, &enc, &all, None, None).unwrap();
        let logits = decode_on(&mut tape, &vars, &params, &g, &enc, x, None, None).unwrap();
        assert!(tape.data_of(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_attention_is_visible_sized() {
        let (g, enc) = toy_graph();
        let params = small_params(6);
        let plan = MaskPlan::from_masked(4, vec![0, 2]).unwrap();
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let _ = encode_on(
            &mut tape,
            &vars,
            &params,
            &g,
            &enc,
            &plan.visible,
            None,
            None,
        )
        .unwrap();
        let attn_shapes: Vec<Vec<usize>> = tape
            .node_summaries()
            .into_iter()
            .filter(|(name, _)| *name == "attn_weights")
            .map(|(_, s)| s.to_vec())
            .collect();
        // enc_layers * heads attention-weight nodes, each n_o x n_o
        assert_eq!(attn_shapes.len(), 2 * 2);
        assert!(attn_shapes.iter().all(|s| s == &vec![2, 2]));
    }
}
