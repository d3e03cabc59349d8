//! Newline-delimited JSON graph format.
//!
//! One object per line: `n` (node count), `edges` (list of `[u, v]` 0-based
//! pairs), optional `node_labels`, `node_attrs`, `edge_labels` (aligned with
//! `edges`), and `target` (int for classification, float for regression).
//! Parsing applies the same normalization as the TU parser: duplicate
//! undirected edges and self-loops are dropped and counted, categorical
//! vocabularies are remapped to contiguous ids preserving sorted order.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    remap_sorted, Graph, GraphDataset, GraphError, LoadStats, NodeFeatures, Target, TargetKind,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_attrs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<RawTarget>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Int(i64),
    Float(f64),
}

pub fn parse_jsonl_graphs(path: &Path) -> Result<GraphDataset, GraphError> {
    let file = std::fs::File::open(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);

    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let recno = i + 1;
        let line = line.map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| GraphError::parse(format!("record {recno}"), e.to_string()))?;
        records.push((recno, rec));
    }
    dataset_from_records(records)
}

fn dataset_from_records(records: Vec<(usize, Record)>) -> Result<GraphDataset, GraphError> {
    if records.is_empty() {
        return Ok(GraphDataset {
            graphs: Vec::new(),
            node_features: NodeFeatures::Labels { num_classes: 0 },
            num_edge_classes: 0,
            target_kind: TargetKind::None,
            stats: LoadStats::default(),
        });
    }

    // Per-record structural checks.
    for (recno, rec) in &records {
        let loc = format!("record {recno}");
        if rec.n == 0 {
            return Err(GraphError::parse(loc, "n must be at least 1"));
        }
        if let Some(&(u, v)) = rec.edges.iter().find(|&&(u, v)| u >= rec.n || v >= rec.n) {
            return Err(GraphError::parse(
                loc,
                format!("edge [{u}, {v}] out of range for n = {}", rec.n),
            ));
        }
        match (&rec.node_labels, &rec.node_attrs) {
            (Some(_), Some(_)) => {
                return Err(GraphError::parse(
                    loc,
                    "both node_labels and node_attrs present; exactly one is allowed",
                ))
            }
            (None, None) => {
                return Err(GraphError::parse(
                    loc,
                    "neither node_labels nor node_attrs present; exactly one is required",
                ))
            }
            (Some(ls), None) if ls.len() != rec.n => {
                return Err(GraphError::parse(loc, "node_labels length != n"))
            }
            (None, Some(attrs)) if attrs.len() != rec.n => {
                return Err(GraphError::parse(loc, "node_attrs length != n"))
            }
            _ => {}
        }
        if let Some(el) = &rec.edge_labels {
            if el.len() != rec.edges.len() {
                return Err(GraphError::parse(loc, "edge_labels length != edges length"));
            }
        }
    }

    // Dataset-level schema consistency.
    let first = &records[0].1;
    let labeled = first.node_labels.is_some();
    let has_edge_labels = first.edge_labels.is_some();
    let target_shape = first
        .target
        .as_ref()
        .map(|t| matches!(t, RawTarget::Int(_)));
    for (recno, rec) in &records[1..] {
        let loc = format!("record {recno}");
        if rec.node_labels.is_some() != labeled {
            return Err(GraphError::parse(
                loc,
                "node feature kind differs from record 1",
            ));
        }
        if rec.edge_labels.is_some() != has_edge_labels {
            return Err(GraphError::parse(
                loc,
                "edge label presence differs from record 1",
            ));
        }
        let shape = rec.target.as_ref().map(|t| matches!(t, RawTarget::Int(_)));
        if shape != target_shape {
            return Err(GraphError::parse(loc, "target kind differs from record 1"));
        }
    }
    if !labeled {
        let dim = first
            .node_attrs
            .as_ref()
            .unwrap()
            .first()
            .map_or(0, Vec::len);
        for (recno, rec) in &records {
            let attrs = rec.node_attrs.as_ref().unwrap();
            if attrs.iter().any(|a| a.len() != dim) {
                return Err(GraphError::parse(
                    format!("record {recno}"),
                    format!("node attribute dimension != {dim}"),
                ));
            }
        }
    }

    // Vocabulary remaps over the whole dataset.
    let node_features = if labeled {
        let flat: Vec<i64> = records
            .iter()
            .flat_map(|(_, r)| r.node_labels.as_ref().unwrap().iter().copied())
            .collect();
        let (_, k) = remap_sorted(&flat);
        NodeFeatures::Labels { num_classes: k }
    } else {
        NodeFeatures::Attributes {
            dim: first
                .node_attrs
                .as_ref()
                .unwrap()
                .first()
                .map_or(0, Vec::len),
        }
    };
    let node_label_values: Option<Vec<i64>> = labeled.then(|| {
        let mut vs: Vec<i64> = records
            .iter()
            .flat_map(|(_, r)| r.node_labels.as_ref().unwrap().iter().copied())
            .collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    });
    let edge_label_values: Option<Vec<i64>> = has_edge_labels.then(|| {
        let mut vs: Vec<i64> = records
            .iter()
            .flat_map(|(_, r)| r.edge_labels.as_ref().unwrap().iter().copied())
            .collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    });
    // An edge-label key that never carries a value (no graph has edges)
    // normalizes to "no edge labels".
    let edge_label_values = edge_label_values.filter(|vs| !vs.is_empty());
    let num_edge_classes = edge_label_values.as_ref().map_or(0, Vec::len);

    let (target_kind, class_values) = match target_shape {
        None => (TargetKind::None, None),
        Some(false) => (TargetKind::Regression, None),
        Some(true) => {
            let mut vs: Vec<i64> = records
                .iter()
                .map(|(_, r)| match r.target.as_ref().unwrap() {
                    RawTarget::Int(v) => *v,
                    RawTarget::Float(_) => unreachable!("checked above"),
                })
                .collect();
            vs.sort_unstable();
            vs.dedup();
            let kind = TargetKind::Classification {
                num_classes: vs.len(),
            };
            (kind, Some(vs))
        }
    };

    let mut stats = LoadStats::default();
    let mut graphs = Vec::with_capacity(records.len());
    for (recno, rec) in &records {
        let mapped_edge_labels: Option<Vec<usize>> = match (&rec.edge_labels, &edge_label_values) {
            (Some(ls), Some(distinct)) => Some(
                ls.iter()
                    .map(|v| distinct.binary_search(v).unwrap())
                    .collect(),
            ),
            _ => None,
        };
        let (edges, edge_labels) =
            Graph::from_raw_edges(rec.n, &rec.edges, mapped_edge_labels.as_deref(), &mut stats)
                .map_err(|idx| {
                    GraphError::parse(
                        format!("record {recno}"),
                        format!("edge {idx} out of range"),
                    )
                })?;
        let node_labels = rec.node_labels.as_ref().map(|ls| {
            let distinct = node_label_values.as_ref().unwrap();
            ls.iter()
                .map(|v| distinct.binary_search(v).unwrap())
                .collect()
        });
        let graph_target = rec.target.as_ref().map(|t| match t {
            RawTarget::Int(v) => {
                Target::Class(class_values.as_ref().unwrap().binary_search(v).unwrap())
            }
            RawTarget::Float(v) => Target::Value(*v),
        });
        graphs.push(Graph {
            num_nodes: rec.n,
            edges,
            node_labels,
            node_attributes: rec.node_attrs.clone(),
            edge_labels,
            graph_target,
        });
    }

    let dataset = GraphDataset {
        graphs,
        node_features,
        num_edge_classes,
        target_kind,
        stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Serializes a dataset back to the JSONL format, one record per graph.
pub fn write_jsonl_graphs(dataset: &GraphDataset, path: &Path) -> Result<(), GraphError> {
    let file = std::fs::File::create(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for g in &dataset.graphs {
        let rec = Record {
            n: g.num_nodes,
            edges: g.edges.clone(),
            node_labels: g
                .node_labels
                .as_ref()
                .map(|ls| ls.iter().map(|&l| l as i64).collect()),
            node_attrs: g.node_attributes.clone(),
            edge_labels: g
                .edge_labels
                .as_ref()
                .map(|ls| ls.iter().map(|&l| l as i64).collect()),
            target: g.graph_target.map(|t| match t {
                Target::Class(c) => RawTarget::Int(c as i64),
                Target::Value(v) => RawTarget::Float(v),
            }),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| GraphError::Format(format!("serialize failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}
