//! Training harness: padded batching, the warmup/linear-decay learning-rate
//! schedule, early stopping, checkpointing, and supervised fine-tuning.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::graph::{compute_encodings, EncodedGraph, GraphDataset, GraphError, Target, TargetKind};
use crate::layer::Dropout;
use crate::model::{
    pretrain_loss_on, sample_mask, EncoderModel, FeatureSchema, GmaeConfig, MaskPlan, ModelError,
    ModelParams, TaskKind,
};
use crate::rng::{self, Prng, RngState};
use crate::scalar::Scalar;
use crate::tensor::{
    adamw_step, clip_global_norm, AdamWConfig, OptimizerState, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const GRAD_CLIP_NORM: f64 = 5.0;
/// Relative improvement an epoch must deliver to reset early stopping.
const IMPROVEMENT_REL: f64 = 1e-6;

/// Pretraining schedule and loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: u64,
    /// `0` means "derive from the run": `max_epochs * ceil(usable / batch)`.
    pub total_steps: u64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub early_stop_patience: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            end_lr: 1e-9,
            warmup_steps: 40_000,
            total_steps: 0,
            batch_size: 32,
            max_epochs: 1000,
            early_stop_patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fills in `total_steps` for a run over `num_batches` batches per epoch.
    pub fn resolved(&self, num_batches: u64) -> Result<TrainConfig, TrainError> {
        let mut cfg = *self;
        if cfg.total_steps == 0 {
            cfg.total_steps = cfg.max_epochs * num_batches;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.end_lr > 0.0 && self.end_lr <= self.peak_lr) {
            return Err(TrainError::Config(format!(
                "need 0 < end_lr <= peak_lr, got {} and {}",
                self.end_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup ({}) must be shorter than the total schedule ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a (0-based) optimizer step: linear ramp to `peak_lr`
/// over the warmup, then linear decay to `end_lr` at `total_steps`,
/// constant afterwards. Continuous at the warmup boundary.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.peak_lr * (step + 1) as f64 / cfg.warmup_steps as f64
    } else if step <= cfg.total_steps {
        let progress =
            (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        // Convex combination rather than peak + delta * p: exact at both ends.
        cfg.peak_lr * (1.0 - progress) + cfg.end_lr * progress
    } else {
        cfg.end_lr
    }
}

/// One optimizer step's worth of graphs, padded to common sizes.
/// The padded feature and bias tensors are materialized on the step's tape
/// by [`batch_pretrain_loss`]; bias entries to and from pad rows carry the
/// `-inf` sentinel, and pad rows contribute nothing to losses or pooling.
#[derive(Debug, Clone)]
pub struct Batch {
    pub graph_indices: Vec<usize>,
    pub node_counts: Vec<usize>,
    pub plans: Vec<MaskPlan>,
    /// Common padded size of decoder inputs (max node count).
    pub n_max: usize,
    /// Common padded size of encoder inputs (max visible count).
    pub v_max: usize,
}

impl Batch {
    pub fn build(
        indices: &[usize],
        dataset: &GraphDataset,
        mask_ratio: f64,
        rng: &mut Prng,
    ) -> Result<Batch, TrainError> {
        let mut plans = Vec::with_capacity(indices.len());
        let mut node_counts = Vec::with_capacity(indices.len());
        for &gi in indices {
            let n = dataset.graphs[gi].num_nodes;
            plans.push(sample_mask(n, mask_ratio, rng)?);
            node_counts.push(n);
        }
        let n_max = node_counts.iter().copied().max().unwrap_or(0);
        let v_max = plans.iter().map(|p| p.visible.len()).max().unwrap_or(0);
        Ok(Batch {
            graph_indices: indices.to_vec(),
            node_counts,
            plans,
            n_max,
            v_max,
        })
    }

    /// True where a row of the padded decoder input is padding for the
    /// batch member at `pos`.
    pub fn padding_mask(&self, pos: usize) -> Vec<bool> {
        (0..self.n_max)
            .map(|r| r >= self.node_counts[pos])
            .collect()
    }
}

/// Mean reconstruction loss of a batch on an existing tape.
#[allow(clippy::too_many_arguments)]
pub fn batch_pretrain_loss<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &[crate::tensor::Var],
    params: &ModelParams<F>,
    dataset: &GraphDataset,
    encodings: &[EncodedGraph],
    batch: &Batch,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<crate::tensor::Var, TrainError> {
    let mut losses = Vec::with_capacity(batch.graph_indices.len());
    for (pos, &gi) in batch.graph_indices.iter().enumerate() {
        let loss = pretrain_loss_on(
            tape,
            vars,
            params,
            &dataset.graphs[gi],
            &encodings[gi],
            &batch.plans[pos],
            Some(batch.v_max),
            Some(batch.n_max),
            dropout.as_deref_mut(),
        )?;
        losses.push(loss);
    }
    let total = tape.add_n(&losses)?;
    Ok(tape.scale(total, F::one() / F::from_usize(losses.len())))
}

/// Everything the pretraining loop carries between epochs; exactly what a
/// checkpoint has to capture for bit-exact resumption.
pub struct TrainState<F> {
    pub params: ModelParams<F>,
    /// Parameter tensors of the best epoch so far, in store order.
    pub best: Vec<Tensor<F>>,
    pub opt: OptimizerState<F>,
    pub rng: Prng,
    pub epoch: u64,
    pub step: u64,
    pub best_epoch: u64,
    pub best_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl<F: Scalar> TrainState<F> {
    /// The parameters of the best epoch, as a full model.
    pub fn best_model(&self) -> ModelParams<F> {
        let mut best = self.params.clone();
        for (idx, tensor) in self.best.iter().enumerate() {
            *best.store.tensor_mut(idx) = tensor.clone();
        }
        best
    }

    fn capture_best(&mut self) {
        self.best = self
            .params
            .store
            .entries()
            .iter()
            .map(|e| e.tensor.clone())
            .collect();
    }
}

/// Result of a pretraining run.
pub struct PretrainOutcome<F> {
    pub state: TrainState<F>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub best_epoch: u64,
    pub best_loss: f64,
    pub steps: u64,
    /// Graphs excluded from pretraining because they cannot be masked
    /// (fewer than two nodes).
    pub skipped_graphs: usize,
}

fn improved(best: f64, candidate: f64) -> bool {
    candidate < best - best.abs() * IMPROVEMENT_REL
}

/// Self-supervised pretraining from scratch.
pub fn pretrain<F: Scalar>(
    dataset: &GraphDataset,
    gmae_cfg: &GmaeConfig,
    train_cfg: &TrainConfig,
) -> Result<PretrainOutcome<F>, TrainError> {
    let encodings = encode_all(dataset, gmae_cfg.max_spd);
    let mut rng = rng::seeded(train_cfg.seed);
    let schema = FeatureSchema::of(dataset);
    let params = ModelParams::init(gmae_cfg, &schema, &mut rng)?;
    let opt = OptimizerState::new(&params.store, AdamWConfig::default());
    let mut state = TrainState {
        best: Vec::new(),
        opt,
        rng,
        epoch: 0,
        step: 0,
        best_epoch: 0,
        best_loss: f64::MAX,
        epoch_losses: Vec::new(),
        params,
    };
    state.capture_best();
    let history = train_loop(&mut state, dataset, &encodings, train_cfg)?;
    Ok(PretrainOutcome { state, history })
}

/// Continues a checkpointed run under the same configuration (possibly with
/// a raised `max_epochs`). Bit-identical to having trained straight through.
pub fn pretrain_resume<F: Scalar>(
    state: &mut TrainState<F>,
    dataset: &GraphDataset,
    train_cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let encodings = encode_all(dataset, state.params.cfg.max_spd);
    train_loop(state, dataset, &encodings, train_cfg)
}

pub fn encode_all(dataset: &GraphDataset, max_spd: u32) -> Vec<EncodedGraph> {
    dataset
        .graphs
        .iter()
        .map(|g| compute_encodings(g, max_spd))
        .collect()
}

fn train_loop<F: Scalar>(
    state: &mut TrainState<F>,
    dataset: &GraphDataset,
    encodings: &[EncodedGraph],
    train_cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.graphs[i].num_nodes >= 2)
        .collect();
    let skipped = dataset.len() - usable.len();
    if usable.is_empty() {
        return Err(TrainError::Config(
            "no graph in the dataset has at least two nodes".into(),
        ));
    }
    let num_batches = usable.len().div_ceil(train_cfg.batch_size) as u64;
    let cfg = train_cfg.resolved(num_batches)?;
    let mask_ratio = state.params.cfg.mask_ratio;
    let dropout_rate = state.params.cfg.dropout;

    while state.epoch < cfg.max_epochs {
        let mut order = usable.clone();
        rng::shuffle(&mut state.rng, &mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::build(chunk, dataset, mask_ratio, &mut state.rng)?;
            let mut tape = Tape::new();
            let vars = state.params.store.bind(&mut tape);
            let loss = {
                let mut dropout = Dropout {
                    rate: dropout_rate,
                    rng: &mut state.rng,
                };
                let dropout_opt = (dropout_rate > 0.0).then_some(&mut dropout);
                batch_pretrain_loss(
                    &mut tape,
                    &vars,
                    &state.params,
                    dataset,
                    encodings,
                    &batch,
                    dropout_opt,
                )?
            };
            tape.backward(loss)?;
            let mut grads = state.params.store.collect_grads(&tape, &vars);
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            let lr = lr_at(state.step, &cfg);
            adamw_step(&mut state.params.store, &grads, &mut state.opt, lr)?;
            state.step += 1;
            loss_sum += tape.scalar_value(loss).as_f64() * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / usable.len() as f64;
        state.epoch += 1;
        state.epoch_losses.push(epoch_loss);
        if improved(state.best_loss, epoch_loss) {
            state.best_loss = epoch_loss;
            state.best_epoch = state.epoch;
            state.capture_best();
        } else if state.epoch - state.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }

    Ok(TrainHistory {
        epoch_losses: state.epoch_losses.clone(),
        best_epoch: state.best_epoch,
        best_loss: state.best_loss,
        steps: state.step,
        skipped_graphs: skipped,
    })
}

/// Fine-tuning configuration. The learning rate is constant (no warmup).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the dataset held out for per-epoch validation metrics;
    /// zero disables the split.
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 300,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneEpoch {
    /// Mean training loss of the epoch: L1 (MAE) for regression,
    /// cross-entropy for classification.
    pub train_loss: f64,
    /// Held-out metric: MAE for regression, accuracy for classification.
    pub val_metric: Option<f64>,
}

fn graph_target_value(t: Option<Target>) -> Result<Target, TrainError> {
    t.ok_or_else(|| TrainError::Config("graph has no target to fine-tune on".into()))
}

/// Supervised fine-tuning: the decoder is discarded, a fresh linear head is
/// attached over mean-pooled encoder output, and every encoder parameter is
/// updated alongside it.
pub fn finetune<F: Scalar>(
    params: &ModelParams<F>,
    dataset: &GraphDataset,
    task: TaskKind,
    cfg: &FinetuneConfig,
) -> Result<(EncoderModel<F>, Vec<FinetuneEpoch>), TrainError> {
    match (task, dataset.target_kind) {
        (TaskKind::Regression, TargetKind::Regression) => {}
        (
            TaskKind::Classification { num_classes: a },
            TargetKind::Classification { num_classes: b },
        ) if a == b => {}
        (task, kind) => {
            return Err(TrainError::Config(format!(
                "task head {task:?} does not match dataset targets {kind:?}"
            )))
        }
    }
    if dataset.is_empty() {
        return Err(TrainError::Config(
            "cannot fine-tune on an empty dataset".into(),
        ));
    }

    let encodings = encode_all(dataset, params.cfg.max_spd);
    let mut rng = rng::seeded(cfg.seed);
    let mut model = params.extract_encoder(task, &mut rng);
    let mut opt = OptimizerState::new(&model.store, AdamWConfig::default());

    // Deterministic validation split.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng::shuffle(&mut rng, &mut order);
    let val_len = ((dataset.len() as f64) * cfg.val_fraction).floor() as usize;
    let (train_idx, val_idx) = order.split_at(dataset.len() - val_len);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();
    if train_idx.is_empty() {
        return Err(TrainError::Config(
            "validation split leaves no training graphs".into(),
        ));
    }

    let mut history = Vec::with_capacity(cfg.epochs as usize);
    for _ in 0..cfg.epochs {
        let mut order = train_idx.clone();
        rng::shuffle(&mut rng, &mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let n_max = chunk
                .iter()
                .map(|&i| dataset.graphs[i].num_nodes)
                .max()
                .unwrap();
            let mut tape = Tape::new();
            let vars = model.store.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &gi in chunk {
                let pred = model.predict_on(
                    &mut tape,
                    &vars,
                    &dataset.graphs[gi],
                    &encodings[gi],
                    Some(n_max),
                )?;
                let loss = match (task, graph_target_value(dataset.graphs[gi].graph_target)?) {
                    (TaskKind::Regression, Target::Value(v)) => {
                        tape.loss_l1(pred, &[F::from_f64(v)])?
                    }
                    (TaskKind::Classification { .. }, Target::Class(c)) => {
                        tape.loss_cross_entropy(pred, &[c])?
                    }
                    (_, t) => {
                        return Err(TrainError::Config(format!(
                            "target {t:?} does not match the task head"
                        )))
                    }
                };
                losses.push(loss);
            }
            let total = tape.add_n(&losses)?;
            let loss = tape.scale(total, F::one() / F::from_usize(losses.len()));
            tape.backward(loss)?;
            let mut grads = model.store.collect_grads(&tape, &vars);
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            adamw_step(&mut model.store, &grads, &mut opt, cfg.lr)?;
            loss_sum += tape.scalar_value(loss).as_f64() * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_metric = if val_idx.is_empty() {
            None
        } else {
            Some(validate_model(&model, dataset, &encodings, &val_idx)?)
        };
        history.push(FinetuneEpoch {
            train_loss,
            val_metric,
        });
    }
    Ok((model, history))
}

/// Held-out metric: MAE for regression, accuracy for classification.
pub fn validate_model<F: Scalar>(
    model: &EncoderModel<F>,
    dataset: &GraphDataset,
    encodings: &[EncodedGraph],
    indices: &[usize],
) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for &gi in indices {
        let pred = model.predict(&dataset.graphs[gi], &encodings[gi])?;
        match (
            model.task,
            graph_target_value(dataset.graphs[gi].graph_target)?,
        ) {
            (TaskKind::Regression, Target::Value(v)) => {
                acc += (pred.data()[0].as_f64() - v).abs();
            }
            (TaskKind::Classification { .. }, Target::Class(c)) => {
                let row = pred.data();
                let argmax = (0..row.len())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap();
                acc += f64::from(argmax == c);
            }
            (_, t) => {
                return Err(TrainError::Config(format!(
                    "target {t:?} does not match the task head"
                )))
            }
        }
    }
    Ok(acc / indices.len() as f64)
}

// ---- checkpoints -----------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"GMAE";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct CheckpointMeta {
    kind: String,
    gmae: GmaeConfig,
    train: TrainConfig,
    schema: FeatureSchema,
    task: Option<TaskKind>,
    epoch: u64,
    step: u64,
    best_epoch: u64,
    best_loss: f64,
    epoch_losses: Vec<f64>,
    rng: RngState,
    opt_step: u64,
    tensor_count: u64,
}

/// On-disk training snapshot. Layout is rebuilt from `gmae` + `schema` and
/// the tensor payload is matched by name, so loading a checkpoint saved at
/// step `k` and continuing reproduces a straight run bit for bit.
pub struct Checkpoint<F> {
    meta: CheckpointMeta,
    tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn from_pretrain(state: &TrainState<F>, train_cfg: &TrainConfig) -> Checkpoint<F> {
        let mut tensors = Vec::new();
        for e in state.params.store.entries() {
            tensors.push((e.name.clone(), e.tensor.clone()));
        }
        for (e, best) in state.params.store.entries().iter().zip(&state.best) {
            tensors.push((format!("best/{}", e.name), best.clone()));
        }
        push_opt_tensors(&mut tensors, &state.params.store, &state.opt);
        Checkpoint {
            meta: CheckpointMeta {
                kind: "pretrain".into(),
                gmae: state.params.cfg,
                train: *train_cfg,
                schema: state.params.schema,
                task: None,
                epoch: state.epoch,
                step: state.step,
                best_epoch: state.best_epoch,
                best_loss: state.best_loss,
                epoch_losses: state.epoch_losses.clone(),
                rng: rng::capture(&state.rng),
                opt_step: state.opt.step,
                tensor_count: tensors.len() as u64,
            },
            tensors,
        }
    }

    pub fn from_finetune(model: &EncoderModel<F>, train_cfg: &TrainConfig) -> Checkpoint<F> {
        let tensors: Vec<(String, Tensor<F>)> = model
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                kind: "finetune".into(),
                gmae: model.cfg,
                train: *train_cfg,
                schema: model.schema,
                task: Some(model.task),
                epoch: 0,
                step: 0,
                best_epoch: 0,
                best_loss: 0.0,
                epoch_losses: Vec::new(),
                rng: rng::capture(&rng::seeded(0)),
                opt_step: 0,
                tensor_count: tensors.len() as u64,
            },
            tensors,
        }
    }

    pub fn kind(&self) -> &str {
        &self.meta.kind
    }

    pub fn gmae_config(&self) -> &GmaeConfig {
        &self.meta.gmae
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.meta.train
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.meta.schema
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.meta.epoch_losses
    }

    fn lookup(&self, name: &str) -> Result<&Tensor<F>, TrainError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TrainError::Checkpoint(format!("tensor {name} missing from checkpoint")))
    }

    fn fill_store(
        &self,
        store: &mut crate::tensor::ParamStore<F>,
        prefix: &str,
    ) -> Result<(), TrainError> {
        for i in 0..store.len() {
            let name = format!("{prefix}{}", store.entries()[i].name);
            let loaded = self.lookup(&name)?;
            if loaded.shape() != store.tensor(i).shape() {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    store.tensor(i).shape()
                )));
            }
            *store.tensor_mut(i) = loaded.clone();
        }
        Ok(())
    }

    /// Restores a pretraining state.
    pub fn into_pretrain(self) -> Result<(TrainState<F>, TrainConfig), TrainError> {
        if self.meta.kind != "pretrain" {
            return Err(TrainError::Checkpoint(format!(
                "expected a pretrain checkpoint, found kind {:?}",
                self.meta.kind
            )));
        }
        // Layout reconstruction: same cfg + schema => identical names/shapes.
        let mut layout_rng = rng::seeded(0);
        let mut params = ModelParams::init(&self.meta.gmae, &self.meta.schema, &mut layout_rng)?;
        self.fill_store(&mut params.store, "")?;
        let best = params
            .store
            .entries()
            .iter()
            .map(|e| self.lookup(&format!("best/{}", e.name)).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let mut opt = OptimizerState::new(&params.store, AdamWConfig::default());
        opt.step = self.meta.opt_step;
        for (i, e) in params.store.entries().iter().enumerate() {
            opt.first[i] = self.lookup(&format!("opt.m/{}", e.name))?.data().to_vec();
            opt.second[i] = self.lookup(&format!("opt.v/{}", e.name))?.data().to_vec();
        }
        let state = TrainState {
            params,
            best,
            opt,
            rng: rng::restore(&self.meta.rng),
            epoch: self.meta.epoch,
            step: self.meta.step,
            best_epoch: self.meta.best_epoch,
            best_loss: self.meta.best_loss,
            epoch_losses: self.meta.epoch_losses.clone(),
        };
        Ok((state, self.meta.train))
    }

    /// Restores a fine-tuned encoder model.
    pub fn into_finetune(self) -> Result<EncoderModel<F>, TrainError> {
        if self.meta.kind != "finetune" {
            return Err(TrainError::Checkpoint(format!(
                "expected a finetune checkpoint, found kind {:?}",
                self.meta.kind
            )));
        }
        let task = self
            .meta
            .task
            .ok_or_else(|| TrainError::Checkpoint("finetune checkpoint without task".into()))?;
        let mut layout_rng = rng::seeded(0);
        let params = ModelParams::init(&self.meta.gmae, &self.meta.schema, &mut layout_rng)?;
        let mut model = params.extract_encoder(task, &mut layout_rng);
        self.fill_store(&mut model.store, "")?;
        Ok(model)
    }

    /// The best-epoch model of a pretrain checkpoint, for inference.
    pub fn best_model(self) -> Result<ModelParams<F>, TrainError> {
        let (state, _) = self.into_pretrain()?;
        Ok(state.best_model())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io_err = |e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| TrainError::Checkpoint(format!("meta serialization failed: {e}")))?;
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            w.write_all(&CKPT_VERSION.to_le_bytes())?;
            w.write_all(&(meta.len() as u32).to_le_bytes())?;
            w.write_all(&meta)?;
            for (name, tensor) in &self.tensors {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
                for &d in tensor.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in tensor.data() {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
            w.flush()
        })()
        .map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint<F>, TrainError> {
        let io_err = |e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let bytes = std::fs::read(path).map_err(io_err)?;
        let mut r = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| TrainError::Checkpoint("file too short for magic bytes".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(TrainError::Checkpoint(format!(
                "bad magic bytes {magic:?}; not a checkpoint file"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint version {version} (supported: {CKPT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)
            .map_err(|_| TrainError::Checkpoint("truncated metadata block".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| TrainError::Checkpoint(format!("metadata parse failed: {e}")))?;
        let mut tensors = Vec::with_capacity(meta.tensor_count as usize);
        for _ in 0..meta.tensor_count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| TrainError::Checkpoint("truncated tensor name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| TrainError::Checkpoint(format!("truncated data for {name}")))?;
                data.push(F::from_f64(f64::from_le_bytes(buf)));
            }
            tensors.push((
                name,
                Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?,
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn push_opt_tensors<F: Scalar>(
    tensors: &mut Vec<(String, Tensor<F>)>,
    store: &crate::tensor::ParamStore<F>,
    opt: &OptimizerState<F>,
) {
    for (i, e) in store.entries().iter().enumerate() {
        let shape = e.tensor.shape().to_vec();
        tensors.push((
            format!("opt.m/{}", e.name),
            Tensor::new(shape.clone(), opt.first[i].clone()).unwrap(),
        ));
        tensors.push((
            format!("opt.v/{}", e.name),
            Tensor::new(shape, opt.second[i].clone()).unwrap(),
        ));
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| TrainError::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| TrainError::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Convenience wrappers matching the CLI surface.
pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<(), TrainError> {
    ckpt.save(path)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, TrainError> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, LoadStats, NodeFeatures};

    fn desk_train_cfg() -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-3,
            end_lr: 1e-6,
            warmup_steps: 5,
            total_steps: 0,
            batch_size: 4,
            max_epochs: 3,
            early_stop_patience: 50,
            seed: 11,
        }
    }

    fn tiny_dataset() -> GraphDataset {
        let mk = |n: usize, edges: Vec<(usize, usize)>| {
            let labels = (0..n).map(|i| i % 2).collect();
            Graph {
                num_nodes: n,
                edges,
                node_labels: Some(labels),
                node_attributes: None,
                edge_labels: None,
                graph_target: Some(Target::Class(n % 2)),
            }
        };
        GraphDataset {
            graphs: vec![
                mk(3, vec![(0, 1), (1, 2)]),
                mk(4, vec![(0, 1), (1, 2), (2, 3), (0, 3)]),
                mk(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)]),
                mk(2, vec![(0, 1)]),
                mk(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]),
            ],
            node_features: NodeFeatures::Labels { num_classes: 2 },
            num_edge_classes: 0,
            target_kind: TargetKind::Classification { num_classes: 2 },
            stats: LoadStats::default(),
        }
    }

    fn tiny_gmae_cfg() -> GmaeConfig {
        GmaeConfig {
            enc_layers: 1,
            dec_layers: 1,
            hidden: 8,
            heads: 2,
            mask_ratio: 0.5,
            max_spd: 10,
            max_degree: 8,
            ff_multiplier: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn lr_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            warmup_steps: 40_000,
            total_steps: 100_000,
            ..TrainConfig::default()
        };
        assert!((lr_at(40_000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(100_000, &cfg) - 1e-9).abs() < 1e-18);
        assert!((lr_at(200_000, &cfg) - 1e-9).abs() < 1e-18);
        // Midpoint of the ramp: peak/2 * (1 + 2/warmup)
        let mid = lr_at(20_000, &cfg);
        let expected = 1e-4 / 2.0 * (1.0 + 2.0 / 40_000.0);
        assert!((mid - expected).abs() < 1e-18, "{mid} vs {expected}");
        // Continuity at the boundary: the pre-boundary step is one ramp
        // increment below the peak.
        let before = lr_at(39_999, &cfg);
        assert!((before - 1e-4).abs() < 1e-8 / 4.0 + 1e-18);
        assert!(before <= 1e-4);
        // Non-negative everywhere sampled.
        for s in (0..200_000).step_by(997) {
            assert!(lr_at(s, &cfg) > 0.0);
        }
    }

    #[test]
    fn default_warmup_rejected_when_schedule_too_short() {
        let cfg = TrainConfig {
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn improvement_rule_is_relative() {
        assert!(improved(1.0, 0.999_998));
        assert!(!improved(1.0, 0.999_999_9));
        assert!(improved(f64::MAX, 5.0));
        assert!(!improved(0.0, 0.0));
    }

    #[test]
    fn pretrain_is_deterministic_and_skips_one_node_graphs() {
        let mut dataset = tiny_dataset();
        dataset.graphs.push(Graph {
            num_nodes: 1,
            edges: vec![],
            node_labels: Some(vec![0]),
            node_attributes: None,
            edge_labels: None,
            graph_target: Some(Target::Class(0)),
        });
        let out1: PretrainOutcome<f64> =
            pretrain(&dataset, &tiny_gmae_cfg(), &desk_train_cfg()).unwrap();
        let out2: PretrainOutcome<f64> =
            pretrain(&dataset, &tiny_gmae_cfg(), &desk_train_cfg()).unwrap();
        assert_eq!(out1.history.epoch_losses, out2.history.epoch_losses);
        assert_eq!(out1.history.skipped_graphs, 1);
        assert!(out1.history.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn padding_neutrality_for_single_graph_batch() {
        let dataset = tiny_dataset();
        let encodings = encode_all(&dataset, 10);
        let params: ModelParams<f64> = ModelParams::init(
            &tiny_gmae_cfg(),
            &FeatureSchema::of(&dataset),
            &mut rng::seeded(3),
        )
        .unwrap();
        let g = &dataset.graphs[1];
        let enc = &encodings[1];
        let plan = MaskPlan::from_masked(g.num_nodes, vec![1, 3]).unwrap();

        // Unpadded forward.
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let x_e =
            crate::model::encode_on(&mut tape, &vars, &params, g, enc, &plan.visible, None, None)
                .unwrap();
        let unpadded = tape.to_tensor(x_e);

        // Same forward padded far beyond the graph size.
        let mut tape_p = Tape::new();
        let vars_p = params.store.bind(&mut tape_p);
        let x_e_p = crate::model::encode_on(
            &mut tape_p,
            &vars_p,
            &params,
            g,
            enc,
            &plan.visible,
            Some(plan.visible.len() + 5),
            None,
        )
        .unwrap();
        let padded = tape_p.to_tensor(x_e_p);

        for r in 0..plan.visible.len() {
            for c in 0..8 {
                let a = unpadded.data()[r * 8 + c];
                let b = padded.data()[r * 8 + c];
                assert!((a - b).abs() < 1e-10, "row {r} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn early_stop_fires_at_best_epoch_plus_patience() {
        // A single fully symmetric two-node graph: both possible mask plans
        // give the bit-identical loss, and a vanishing learning rate keeps
        // the parameters fixed below f64 resolution. Every epoch therefore
        // repeats the first epoch's loss exactly, the first epoch stays the
        // best, and training must stop after best_epoch + patience epochs.
        let dataset = GraphDataset {
            graphs: vec![Graph {
                num_nodes: 2,
                edges: vec![(0, 1)],
                node_labels: Some(vec![0, 0]),
                node_attributes: None,
                edge_labels: None,
                graph_target: Some(Target::Class(0)),
            }],
            node_features: NodeFeatures::Labels { num_classes: 2 },
            num_edge_classes: 0,
            target_kind: TargetKind::Classification { num_classes: 2 },
            stats: LoadStats::default(),
        };
        let cfg = TrainConfig {
            peak_lr: 1e-30,
            end_lr: 1e-32,
            warmup_steps: 1,
            total_steps: 10_000,
            batch_size: 8,
            max_epochs: 100,
            early_stop_patience: 4,
            seed: 5,
        };
        let out: PretrainOutcome<f64> = pretrain(&dataset, &tiny_gmae_cfg(), &cfg).unwrap();
        assert_eq!(out.history.best_epoch, 1);
        assert_eq!(out.history.epoch_losses.len(), 5); // stopped at epoch 1 + 4
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical_and_resume_matches_straight_run() {
        let dataset = tiny_dataset();
        let gmae = tiny_gmae_cfg();

        // Straight run: 4 epochs.
        let straight_cfg = TrainConfig {
            max_epochs: 4,
            ..desk_train_cfg()
        };
        let straight: PretrainOutcome<f64> = pretrain(&dataset, &gmae, &straight_cfg).unwrap();

        // Stop after 2, checkpoint, resume to 4.
        let half_cfg = TrainConfig {
            max_epochs: 2,
            // keep the schedule identical to the straight run
            total_steps: straight_cfg
                .resolved(dataset.len().div_ceil(straight_cfg.batch_size) as u64)
                .unwrap()
                .total_steps,
            ..straight_cfg
        };
        let half: PretrainOutcome<f64> = pretrain(&dataset, &gmae, &half_cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("gmae-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("half.ckpt");
        Checkpoint::from_pretrain(&half.state, &half_cfg)
            .save(&path)
            .unwrap();

        // save -> load -> save is byte-identical
        let loaded: Checkpoint<f64> = Checkpoint::load(&path).unwrap();
        let path2 = dir.join("half2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );

        let (mut state, _) = Checkpoint::<f64>::load(&path)
            .unwrap()
            .into_pretrain()
            .unwrap();
        let resume_cfg = TrainConfig {
            max_epochs: 4,
            ..half_cfg
        };
        let resumed = pretrain_resume(&mut state, &dataset, &resume_cfg).unwrap();
        assert_eq!(resumed.epoch_losses.len(), 4);
        for (a, b) in resumed
            .epoch_losses
            .iter()
            .zip(&straight.history.epoch_losses)
        {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupted_magic_is_a_checkpoint_error() {
        let dir = std::env::temp_dir().join(format!("gmae-badckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            Checkpoint::<f64>::load(&path),
            Err(TrainError::Checkpoint(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn finetune_head_mismatch_is_config_error() {
        let dataset = tiny_dataset(); // classification targets
        let params: ModelParams<f64> = ModelParams::init(
            &tiny_gmae_cfg(),
            &FeatureSchema::of(&dataset),
            &mut rng::seeded(0),
        )
        .unwrap();
        let err = finetune(
            &params,
            &dataset,
            TaskKind::Regression,
            &FinetuneConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn regression_head_with_exact_targets_has_zero_loss_and_gradient() {
        // Targets equal to current predictions: L1 loss 0, zero gradient.
        let mut dataset = tiny_dataset();
        dataset.target_kind = TargetKind::Regression;
        let params: ModelParams<f64> = ModelParams::init(
            &tiny_gmae_cfg(),
            &FeatureSchema::of(&dataset),
            &mut rng::seeded(7),
        )
        .unwrap();
        let mut model_rng = rng::seeded(13);
        let model = params.extract_encoder(TaskKind::Regression, &mut model_rng);
        let encodings = encode_all(&dataset, 10);
        for (gi, g) in dataset.graphs.iter_mut().enumerate() {
            let pred = model.predict(g, &encodings[gi]).unwrap();
            g.graph_target = Some(Target::Value(pred.data()[0]));
        }
        // One manual step: loss must be 0 and parameters unchanged.
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let mut losses = Vec::new();
        for (gi, g) in dataset.graphs.iter().enumerate() {
            let pred = model
                .predict_on(&mut tape, &vars, g, &encodings[gi], None)
                .unwrap();
            let Target::Value(v) = g.graph_target.unwrap() else {
                unreachable!()
            };
            losses.push(tape.loss_l1(pred, &[v]).unwrap());
        }
        let total = tape.add_n(&losses).unwrap();
        let loss = tape.scale(total, 1.0 / losses.len() as f64);
        tape.backward(loss).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        let grads = model.store.collect_grads(&tape, &vars);
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }
}
