//! Linear evaluation: pooled graph embeddings, a built-in linear SVM probe
//! trained by subgradient descent on the L2-regularized hinge loss
//! (one-vs-rest), and k-fold cross-validated metrics.
//!
//! Embeddings are standardized per dimension using training-fold statistics
//! only. Unless a fixed regularization strength is supplied, it is chosen
//! per outer fold by an inner 3-fold sweep over `{0.01, 0.1, 1, 10}`.
//! Embeddings also export to CSV so an external classifier can reproduce
//! the protocol.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::graph::{kfold_indices, EncodedGraph, GraphDataset, Target};
use crate::model::{embed, ModelError, ModelParams};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where an embedding table came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub checkpoint: String,
    pub dataset: String,
}

/// Pooled graph embeddings with aligned targets.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F> {
    /// One row per graph.
    pub rows: Vec<Vec<F>>,
    pub targets: Vec<Option<Target>>,
    pub provenance: Provenance,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Class labels, or an error if any graph lacks one.
    pub fn class_labels(&self) -> Result<Vec<usize>, EvalError> {
        self.targets
            .iter()
            .map(|t| match t {
                Some(Target::Class(c)) => Ok(*c),
                other => Err(EvalError::Argument(format!(
                    "expected classification targets, found {other:?}"
                ))),
            })
            .collect()
    }
}

/// Embeds every graph with the fixed encoder (no masking, mean pooling).
pub fn embed_dataset<F: Scalar>(
    dataset: &GraphDataset,
    encodings: &[EncodedGraph],
    params: &ModelParams<F>,
    provenance: Provenance,
) -> Result<EmbeddingTable<F>, EvalError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for (g, enc) in dataset.graphs.iter().zip(encodings) {
        let (_, pooled) = embed(params, g, enc)?;
        if pooled.data().iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Argument(
                "non-finite graph embedding produced".into(),
            ));
        }
        rows.push(pooled.data().to_vec());
    }
    Ok(EmbeddingTable {
        rows,
        targets: dataset.graphs.iter().map(|g| g.graph_target).collect(),
        provenance,
    })
}

/// One-vs-rest linear SVM trained by Pegasos-style subgradient descent,
/// with averaged iterates.
#[derive(Debug, Clone)]
pub struct ProbeModel<F> {
    /// `num_classes x dim` weight matrix.
    pub weights: Vec<Vec<F>>,
    pub biases: Vec<F>,
    pub c_reg: f64,
    /// Objective of the averaged iterate after each epoch, summed over the
    /// one-vs-rest subproblems.
    pub trace: Vec<f64>,
}

impl<F: Scalar> ProbeModel<F> {
    pub fn predict(&self, x: &[F]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, (w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let score: f64 = w
                .iter()
                .zip(x)
                .map(|(&wv, &xv)| wv.as_f64() * xv.as_f64())
                .sum::<f64>()
                + b.as_f64();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, xs: &[Vec<F>], ys: &[usize]) -> f64 {
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / ys.len().max(1) as f64
    }
}

/// Regularized hinge objective of one binary subproblem. The bias counts
/// towards the regularizer (it is treated as one more weight coordinate by
/// the subgradient updates).
fn binary_objective<F: Scalar>(
    xs: &[Vec<F>],
    signs: &[f64],
    w: &[f64],
    b: f64,
    lambda: f64,
) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(signs)
        .map(|(x, &s)| {
            let margin = s * (dot_f64(w, x) + b);
            (1.0 - margin).max(0.0)
        })
        .sum::<f64>()
        / xs.len() as f64;
    lambda / 2.0 * (w.iter().map(|v| v * v).sum::<f64>() + b * b) + hinge
}

fn dot_f64<F: Scalar>(w: &[f64], x: &[F]) -> f64 {
    w.iter().zip(x).map(|(&wv, &xv)| wv * xv.as_f64()).sum()
}

/// Trains the probe. `epochs` full passes of single-sample subgradient
/// steps in a seeded shuffled order; the returned model uses the averaged
/// iterates. The regularization is `lambda = 1 / (c_reg * m)`.
pub fn train_svm_probe<F: Scalar>(
    xs: &[Vec<F>],
    ys: &[usize],
    c_reg: f64,
    epochs: usize,
    seed: u64,
) -> Result<ProbeModel<F>, EvalError> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(EvalError::Argument(
            "features and labels must be equally many and non-empty".into(),
        ));
    }
    let num_classes = ys.iter().copied().max().unwrap() + 1;
    let mut present = vec![false; num_classes];
    for &y in ys {
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(EvalError::Argument(
            "probe training needs at least two classes".into(),
        ));
    }
    let m = xs.len();
    let dim = xs[0].len();
    let lambda = 1.0 / (c_reg * m as f64);

    // Per class: current iterate, averaged iterate.
    let mut w = vec![vec![0.0f64; dim]; num_classes];
    let mut b = vec![0.0f64; num_classes];
    let mut w_avg = vec![vec![0.0f64; dim]; num_classes];
    let mut b_avg = vec![0.0f64; num_classes];
    let signs: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            ys.iter()
                .map(|&y| if y == c { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();

    let mut rng: Prng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut t = 0u64;
    let mut trace = Vec::with_capacity(epochs);
    let radius_sq = 1.0 / lambda; // projection ball of Pegasos
    for _ in 0..epochs {
        rng::shuffle(&mut rng, &mut order);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &xs[i];
            for c in 0..num_classes {
                let s = signs[c][i];
                let margin = s * (dot_f64(&w[c], x) + b[c]);
                let shrink = 1.0 - eta * lambda;
                for wv in w[c].iter_mut() {
                    *wv *= shrink;
                }
                b[c] *= shrink;
                if margin < 1.0 {
                    for (wv, &xv) in w[c].iter_mut().zip(x) {
                        *wv += eta * s * xv.as_f64();
                    }
                    b[c] += eta * s;
                }
                let norm_sq = w[c].iter().map(|v| v * v).sum::<f64>() + b[c] * b[c];
                if norm_sq > radius_sq {
                    let rescale = (radius_sq / norm_sq).sqrt();
                    for wv in w[c].iter_mut() {
                        *wv *= rescale;
                    }
                    b[c] *= rescale;
                }
            }
            let k = t as f64;
            for c in 0..num_classes {
                for (avg, &cur) in w_avg[c].iter_mut().zip(&w[c]) {
                    *avg += (cur - *avg) / k;
                }
                b_avg[c] += (b[c] - b_avg[c]) / k;
            }
        }
        let objective: f64 = (0..num_classes)
            .filter(|&c| present[c])
            .map(|c| binary_objective(xs, &signs[c], &w_avg[c], b_avg[c], lambda))
            .sum();
        trace.push(objective);
    }

    Ok(ProbeModel {
        weights: w_avg
            .into_iter()
            .map(|wc| wc.into_iter().map(F::from_f64).collect())
            .collect(),
        biases: b_avg.into_iter().map(F::from_f64).collect(),
        c_reg,
        trace,
    })
}

/// Per-dimension standardization statistics fit on training rows.
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<F: Scalar>(rows: &[Vec<F>]) -> Standardizer {
        let dim = rows.first().map_or(0, Vec::len);
        let m = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v.as_f64() / m;
            }
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v.as_f64() - mu) * (v.as_f64() - mu) / m;
            }
        }
        let inv_std = var
            .into_iter()
            .map(|v| {
                let s = v.sqrt();
                if s > 1e-12 {
                    1.0 / s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    pub fn apply<F: Scalar>(&self, rows: &[Vec<F>]) -> Vec<Vec<F>> {
        rows.iter()
            .map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.inv_std))
                    .map(|(&v, (&mu, &is))| F::from_f64((v.as_f64() - mu) * is))
                    .collect()
            })
            .collect()
    }
}

const C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
const PROBE_EPOCHS: usize = 60;

fn gather<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// Trains a probe on the given rows, choosing the regularization strength
/// by an inner 3-fold split unless `c_fixed` pins it.
fn fit_probe<F: Scalar>(
    xs: &[Vec<F>],
    ys: &[usize],
    c_fixed: Option<f64>,
    seed: u64,
) -> Result<ProbeModel<F>, EvalError> {
    let c_reg = match c_fixed {
        Some(c) => c,
        None => {
            let mut best = (f64::NEG_INFINITY, C_GRID[0]);
            if let Ok(inner) = kfold_indices(xs.len(), 3, seed) {
                for &c in &C_GRID {
                    let mut acc_sum = 0.0;
                    let mut usable = 0;
                    for f in 0..inner.len() {
                        let test_idx = &inner[f];
                        let train_idx: Vec<usize> = inner
                            .iter()
                            .enumerate()
                            .filter(|&(i, _)| i != f)
                            .flat_map(|(_, fold)| fold.iter().copied())
                            .collect();
                        let x_tr = gather(xs, &train_idx);
                        let y_tr = gather(ys, &train_idx);
                        let Ok(probe) = train_svm_probe(&x_tr, &y_tr, c, PROBE_EPOCHS, seed) else {
                            continue; // single-class inner fold
                        };
                        acc_sum += probe.accuracy(&gather(xs, test_idx), &gather(ys, test_idx));
                        usable += 1;
                    }
                    if usable > 0 {
                        let mean = acc_sum / usable as f64;
                        if mean > best.0 {
                            best = (mean, c);
                        }
                    }
                }
            }
            best.1
        }
    };
    train_svm_probe(xs, ys, c_reg, PROBE_EPOCHS, seed)
}

/// K-fold linear evaluation, repeated with fresh fold splits; returns the
/// mean and sample standard deviation of the per-repeat accuracies.
pub fn kfold_evaluate<F: Scalar>(
    emb: &EmbeddingTable<F>,
    k: usize,
    repeats: usize,
    c_reg: Option<f64>,
    seed: u64,
) -> Result<(f64, f64), EvalError> {
    if repeats == 0 {
        return Err(EvalError::Argument("need at least one repeat".into()));
    }
    let ys = emb.class_labels()?;
    let mut repeat_accuracies = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let rep_seed = seed.wrapping_add(rep as u64);
        let folds = kfold_indices(emb.len(), k, rep_seed)
            .map_err(|e| EvalError::Argument(e.to_string()))?;
        let mut fold_acc = 0.0;
        for f in 0..k {
            let test_idx = &folds[f];
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            let x_tr_raw = gather(&emb.rows, &train_idx);
            let std = Standardizer::fit(&x_tr_raw);
            let x_tr = std.apply(&x_tr_raw);
            let y_tr = gather(&ys, &train_idx);
            let probe = fit_probe(
                &x_tr,
                &y_tr,
                c_reg,
                rep_seed.wrapping_mul(31).wrapping_add(f as u64),
            )?;
            let x_te = std.apply(&gather(&emb.rows, test_idx));
            let y_te = gather(&ys, test_idx);
            fold_acc += probe.accuracy(&x_te, &y_te);
        }
        repeat_accuracies.push(fold_acc / k as f64);
    }
    let mean = repeat_accuracies.iter().sum::<f64>() / repeats as f64;
    let std = if repeats > 1 {
        (repeat_accuracies
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (repeats - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Mean absolute error.
pub fn mae_metric(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(EvalError::Argument(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Fraction of the most common label; the floor any probe should reach.
pub fn majority_fraction(ys: &[usize]) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    let max_label = ys.iter().copied().max().unwrap();
    let mut counts = vec![0usize; max_label + 1];
    for &y in ys {
        counts[y] += 1;
    }
    *counts.iter().max().unwrap() as f64 / ys.len() as f64
}

/// Writes `graph_id,target,e0..e{d-1}` rows; floats carry 17 significant
/// digits so parsing them back is exact.
pub fn write_embeddings_csv<F: Scalar>(
    emb: &EmbeddingTable<F>,
    path: &Path,
) -> Result<(), EvalError> {
    let io_err = |e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        write!(w, "graph_id,target")?;
        for c in 0..emb.dim() {
            write!(w, ",e{c}")?;
        }
        writeln!(w)?;
        for (i, row) in emb.rows.iter().enumerate() {
            match emb.targets[i] {
                Some(Target::Class(c)) => write!(w, "{i},{c}")?,
                Some(Target::Value(v)) => write!(w, "{i},{v:.16e}")?,
                None => write!(w, "{i},")?,
            }
            for &v in row {
                write!(w, ",{:.16e}", v.as_f64())?;
            }
            writeln!(w)?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

/// Parses the CSV written by [`write_embeddings_csv`].
pub fn read_embeddings_csv<F: Scalar>(path: &Path) -> Result<EmbeddingTable<F>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(EvalError::Parse {
            location: "line 1".into(),
            message: "empty file".into(),
        });
    };
    if !header.starts_with("graph_id,target") {
        return Err(EvalError::Parse {
            location: "line 1".into(),
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(EvalError::Parse {
                location: loc(),
                message: "expected graph_id,target,e0..".into(),
            });
        }
        let target = if fields[1].is_empty() {
            None
        } else if let Ok(c) = fields[1].parse::<usize>() {
            Some(Target::Class(c))
        } else {
            Some(Target::Value(fields[1].parse::<f64>().map_err(|e| {
                EvalError::Parse {
                    location: loc(),
                    message: e.to_string(),
                }
            })?))
        };
        let row: Vec<F> = fields[2..]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map(F::from_f64)
                    .map_err(|e| EvalError::Parse {
                        location: loc(),
                        message: e.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        rows.push(row);
        targets.push(target);
    }
    if let Some(dim) = rows.first().map(Vec::len) {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EvalError::Parse {
                location: "file".into(),
                message: "ragged embedding rows".into(),
            });
        }
    }
    Ok(EmbeddingTable {
        rows,
        targets,
        provenance: Provenance {
            checkpoint: String::new(),
            dataset: path.display().to_string(),
        },
    })
}
