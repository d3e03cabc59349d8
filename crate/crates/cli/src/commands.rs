//! Command implementations. Each takes a fully resolved [`RunSpec`], writes
//! its manifest, and produces CSV/checkpoint artifacts in the output
//! directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gmae_core::eval::{
    embed_dataset, kfold_evaluate, read_embeddings_csv, write_embeddings_csv, Provenance,
};
use gmae_core::graph::{GraphDataset, TargetKind};
use gmae_core::mem::{estimate_peak_floats, measure_peak_floats, MemMode};
use gmae_core::model::{FeatureSchema, TaskKind};
use gmae_core::rng;
use gmae_core::train::{
    encode_all, finetune, pretrain, Checkpoint, FinetuneEpoch, PretrainOutcome, TrainHistory,
};
use gmae_core::ModelParams;

use crate::error::CliError;
use crate::spec::RunSpec;

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn history_csv(history: &TrainHistory) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, loss) in history.epoch_losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, loss));
    }
    s
}

fn finetune_csv(history: &[FinetuneEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_metric\n");
    for (i, e) in history.iter().enumerate() {
        match e.val_metric {
            Some(v) => s.push_str(&format!("{},{},{}\n", i + 1, e.train_loss, v)),
            None => s.push_str(&format!("{},{},\n", i + 1, e.train_loss)),
        }
    }
    s
}

fn task_for(dataset: &GraphDataset) -> Result<TaskKind, CliError> {
    match dataset.target_kind {
        TargetKind::Classification { num_classes } => Ok(TaskKind::Classification { num_classes }),
        TargetKind::Regression => Ok(TaskKind::Regression),
        TargetKind::None => Err(CliError::data(
            "dataset carries no graph targets; nothing to fine-tune or evaluate".into(),
        )),
    }
}

fn run_pretrain(
    spec: &RunSpec,
    dataset: &GraphDataset,
    out: &Path,
) -> Result<PretrainOutcome<f64>, CliError> {
    let outcome = pretrain::<f64>(dataset, &spec.gmae, &spec.train)?;
    if outcome.history.skipped_graphs > 0 {
        eprintln!(
            "note: skipped {} single-node graphs during pretraining",
            outcome.history.skipped_graphs
        );
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("history.csv"), &history_csv(&outcome.history))?;
    Checkpoint::from_pretrain(&outcome.state, &spec.train).save(&out.join("gmae.ckpt"))?;
    Ok(outcome)
}

pub fn cmd_pretrain(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    spec.write_manifest()?;
    let dataset = spec.load_dataset()?;
    let outcome = run_pretrain(spec, &dataset, &spec.out)?;
    println!(
        "pretrained {} epochs ({} steps); best epoch {} with loss {}",
        outcome.history.epoch_losses.len(),
        outcome.history.steps,
        outcome.history.best_epoch,
        outcome.history.best_loss
    );
    Ok(())
}

pub fn cmd_finetune(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    spec.write_manifest()?;
    let dataset = spec.load_dataset()?;
    let ckpt_path = spec
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::config("--ckpt is required".into()))?;
    let params: ModelParams = Checkpoint::load(ckpt_path)?.best_model()?;
    let task = task_for(&dataset)?;
    let (model, history) = finetune(&params, &dataset, task, &spec.finetune)?;
    write_file(&spec.out.join("metrics.csv"), &finetune_csv(&history))?;
    Checkpoint::from_finetune(&model, &spec.train).save(&spec.out.join("finetuned.ckpt"))?;
    if let Some(last) = history.last() {
        println!(
            "fine-tuned {} epochs; final train loss {}{}",
            history.len(),
            last.train_loss,
            match last.val_metric {
                Some(v) => format!(", val metric {v}"),
                None => String::new(),
            }
        );
    }
    Ok(())
}

pub fn cmd_embed(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    spec.write_manifest()?;
    let dataset = spec.load_dataset()?;
    let ckpt_path = spec
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::config("--ckpt is required".into()))?;
    let params: ModelParams = Checkpoint::load(ckpt_path)?.best_model()?;
    let encodings = encode_all(&dataset, params.cfg.max_spd);
    let table = embed_dataset(
        &dataset,
        &encodings,
        &params,
        Provenance {
            checkpoint: ckpt_path.display().to_string(),
            dataset: spec.name.clone().unwrap_or_else(|| {
                spec.data
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            }),
        },
    )?;
    write_embeddings_csv(&table, &spec.out.join("embeddings.csv"))?;
    println!(
        "embedded {} graphs into {}",
        table.len(),
        spec.out.join("embeddings.csv").display()
    );
    Ok(())
}

pub fn cmd_eval(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    spec.write_manifest()?;
    let path = spec
        .embeddings
        .as_ref()
        .ok_or_else(|| CliError::config("--embeddings is required".into()))?;
    let table = read_embeddings_csv::<f64>(path)?;
    let (mean, std) = kfold_evaluate(&table, spec.eval.folds, spec.eval.repeats, None, spec.seed)?;
    println!("accuracy,{mean},{std}");
    write_file(
        &spec.out.join("eval.csv"),
        &format!("metric,mean,std\naccuracy,{mean},{std}\n"),
    )?;
    Ok(())
}

/// Metric of one sweep point: k-fold probe accuracy for classification,
/// final validation (or training) MAE for regression.
fn point_metric(
    spec: &RunSpec,
    dataset: &GraphDataset,
    outcome: &PretrainOutcome<f64>,
    seed: u64,
) -> Result<(f64, f64), CliError> {
    match dataset.target_kind {
        TargetKind::Classification { .. } => {
            let params = outcome.state.best_model();
            let encodings = encode_all(dataset, params.cfg.max_spd);
            let table = embed_dataset(dataset, &encodings, &params, Provenance::default())?;
            Ok(kfold_evaluate(
                &table,
                spec.eval.folds,
                spec.eval.repeats,
                None,
                seed,
            )?)
        }
        TargetKind::Regression => {
            let params = outcome.state.best_model();
            let mut ft = spec.finetune;
            ft.seed = seed;
            let (_, history) = finetune(&params, dataset, TaskKind::Regression, &ft)?;
            let last = history
                .last()
                .ok_or_else(|| CliError::runtime("fine-tuning produced no epochs".into()))?;
            Ok((last.val_metric.unwrap_or(last.train_loss), 0.0))
        }
        TargetKind::None => Err(CliError::data(
            "dataset carries no graph targets; sweeps need a metric".into(),
        )),
    }
}

/// Runs `count` independent jobs on up to `jobs` worker threads, returning
/// results in job order.
fn run_points<T, F>(count: usize, jobs: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> =
        (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(count).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(i));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker completed every claimed job")
        })
        .collect()
}

/// Worker-thread cap: the `--jobs` flag bounded by `GMAE_THREADS` when set.
pub fn effective_jobs(requested: usize) -> usize {
    let env_cap = std::env::var("GMAE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(usize::MAX);
    requested.min(env_cap).max(1)
}

fn sweep(
    spec: &RunSpec,
    points: Vec<(String, RunSpec)>,
    header: &str,
    csv_name: &str,
) -> Result<(), CliError> {
    let dataset = spec.load_dataset()?;
    let jobs = effective_jobs(spec.jobs);
    let results = run_points(points.len(), jobs, |i| {
        let (label, point_spec) = &points[i];
        let point_dir = spec.out.join(format!("point_{label}"));
        std::fs::create_dir_all(&point_dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", point_dir.display())))?;
        let outcome = run_pretrain(point_spec, &dataset, &point_dir)?;
        let metric = point_metric(point_spec, &dataset, &outcome, point_spec.seed)?;
        eprintln!("point {label}: metric {} +- {}", metric.0, metric.1);
        Ok(metric)
    })?;

    let mut csv = String::from(header);
    csv.push('\n');
    for ((label, _), (mean, std)) in points.iter().zip(&results) {
        csv.push_str(&format!("{label},{mean},{std}\n"));
    }
    write_file(&spec.out.join(csv_name), &csv)?;
    Ok(())
}

pub fn cmd_sweep_mask(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    spec.write_manifest()?;
    let points: Vec<(String, RunSpec)> = spec
        .ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut p = spec.clone();
            p.gmae.mask_ratio = r;
            p.seed = spec.seed + i as u64;
            p.train.seed = p.seed;
            (format!("{r}"), p)
        })
        .collect();
    sweep(
        &spec,
        points,
        "ratio,metric_mean,metric_std",
        "mask_sweep.csv",
    )
}

pub fn cmd_sweep_decoder(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.depths.sort_unstable();
    spec.write_manifest()?;
    let points: Vec<(String, RunSpec)> = spec
        .depths
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut p = spec.clone();
            p.gmae.dec_layers = d;
            p.seed = spec.seed + i as u64;
            p.train.seed = p.seed;
            (format!("{d}"), p)
        })
        .collect();
    sweep(
        &spec,
        points,
        "depth,metric_mean,metric_std",
        "decoder_sweep.csv",
    )
}

pub fn cmd_memprofile(spec: &RunSpec) -> Result<(), CliError> {
    spec.validate()?;
    spec.write_manifest()?;
    const NODE_CLASSES: usize = 4;
    const EDGE_PROB: f64 = 0.1;

    let jobs = effective_jobs(spec.jobs);
    let modes = [MemMode::Gmae, MemMode::FullEncoder];
    let mut tasks = Vec::new();
    for &n in &spec.sizes {
        for &mode in &modes {
            tasks.push((n, mode));
        }
    }
    let results = run_points(tasks.len(), jobs, |i| {
        let (n, mode) = tasks[i];
        let dataset = gmae_core::graph::synth::er_dataset(spec.seed, n, EDGE_PROB, NODE_CLASSES);
        let g = &dataset.graphs[0];
        let enc = gmae_core::graph::compute_encodings(g, spec.gmae.max_spd);
        let schema = FeatureSchema::of(&dataset);
        let params: ModelParams =
            ModelParams::init(&spec.gmae, &schema, &mut rng::seeded(spec.seed))?;
        let estimate = estimate_peak_floats(n, &spec.gmae, mode, NODE_CLASSES);
        let measured = measure_peak_floats(&params, g, &enc, mode, spec.seed, true)?;
        eprintln!(
            "n {n} mode {}: estimated {} measured {measured}",
            mode.label(),
            estimate.total
        );
        Ok((estimate.total, measured))
    })?;

    let mut csv = String::from("n,mode,estimated_floats,measured_floats\n");
    for ((n, mode), (est, meas)) in tasks.iter().zip(&results) {
        csv.push_str(&format!("{n},{},{est:.0},{meas}\n", mode.label()));
    }
    write_file(&spec.out.join("memprofile.csv"), &csv)?;
    Ok(())
}

pub fn cmd_rerun(manifest: &Path, out_override: Option<PathBuf>) -> Result<(), CliError> {
    let mut spec = RunSpec::read_manifest(manifest)?;
    if let Some(out) = out_override {
        spec.out = out;
    }
    run_spec(&spec)
}

pub fn run_spec(spec: &RunSpec) -> Result<(), CliError> {
    match spec.command.as_str() {
        "pretrain" => cmd_pretrain(spec),
        "finetune" => cmd_finetune(spec),
        "embed" => cmd_embed(spec),
        "eval" => cmd_eval(spec),
        "sweep-mask" => cmd_sweep_mask(spec),
        "sweep-decoder" => cmd_sweep_decoder(spec),
        "memprofile" => cmd_memprofile(spec),
        other => Err(CliError::config(format!(
            "unknown command {other:?} in manifest"
        ))),
    }
}
