//! Graph data model, dataset parsers, and structural precomputation.
//!
//! A [`Graph`] is a small undirected graph with either categorical node
//! labels or float node attributes (exactly one of the two per dataset),
//! optional categorical edge labels, and an optional graph-level target.
//! [`compute_encodings`](encode::compute_encodings) derives what the
//! positional encodings need: degrees, all-pairs shortest-path distances,
//! and one stored shortest path per reachable pair.

mod encode;
mod jsonl;
mod kfold;
pub mod synth;
mod tu;

pub use encode::{compute_encodings, EncodedGraph, UNREACHABLE};
pub use jsonl::{parse_jsonl_graphs, write_jsonl_graphs};
pub use kfold::{kfold_indices, split_kfold};
pub use tu::parse_tu_dataset;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("integrity error at {location}: {message}")]
    Integrity { location: String, message: String },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GraphError {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        GraphError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn integrity(location: impl Into<String>, message: impl Into<String>) -> Self {
        GraphError::Integrity {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// Graph-level supervision target.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// What kind of target the dataset carries, fixed across all graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TargetKind {
    Classification { num_classes: usize },
    Regression,
    None,
}

/// One undirected graph. Nodes are `0..num_nodes`; edges are stored once
/// each in canonical order (endpoints sorted, list sorted lexicographically)
/// so downstream computation never depends on input edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub node_labels: Option<Vec<usize>>,
    pub node_attributes: Option<Vec<Vec<f64>>>,
    pub edge_labels: Option<Vec<usize>>,
    pub graph_target: Option<Target>,
}

/// Canonicalized edge list with labels carried along.
pub type CanonicalEdges = (Vec<(usize, usize)>, Option<Vec<usize>>);

/// Counters for input irregularities the parsers repair silently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
}

impl Graph {
    /// Builds a graph from a raw edge list, dropping self-loops and
    /// duplicate undirected edges (counted in `stats`), and canonicalizing
    /// edge order. Out-of-range endpoints are the caller's error to report;
    /// this returns which edge index offended, if any.
    pub fn from_raw_edges(
        num_nodes: usize,
        raw_edges: &[(usize, usize)],
        raw_edge_labels: Option<&[usize]>,
        stats: &mut LoadStats,
    ) -> Result<CanonicalEdges, usize> {
        let mut seen = std::collections::HashSet::new();
        let mut kept: Vec<((usize, usize), Option<usize>)> = Vec::new();
        for (idx, &(u, v)) in raw_edges.iter().enumerate() {
            if u >= num_nodes || v >= num_nodes {
                return Err(idx);
            }
            if u == v {
                stats.self_loops_dropped += 1;
                continue;
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                stats.duplicate_edges_dropped += 1;
                continue;
            }
            kept.push((key, raw_edge_labels.map(|ls| ls[idx])));
        }
        kept.sort_unstable_by_key(|&(e, _)| e);
        let labels = if raw_edge_labels.is_some() {
            Some(kept.iter().map(|&(_, l)| l.unwrap()).collect())
        } else {
            None
        };
        Ok((kept.iter().map(|&(e, _)| e).collect(), labels))
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(u, v)| u == node || v == node)
            .count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Validates the structural invariants. Parsers call this on every
    /// graph they emit.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.num_nodes == 0 {
            return Err(GraphError::Argument(
                "graph must have at least one node".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v) in &self.edges {
            if u >= self.num_nodes || v >= self.num_nodes {
                return Err(GraphError::Argument(format!(
                    "edge ({u}, {v}) out of range for {} nodes",
                    self.num_nodes
                )));
            }
            if u == v {
                return Err(GraphError::Argument(format!("self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(GraphError::Argument(format!("duplicate edge ({u}, {v})")));
            }
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != self.num_nodes {
                return Err(GraphError::Argument(
                    "node label count != node count".into(),
                ));
            }
        }
        if let Some(attrs) = &self.node_attributes {
            if attrs.len() != self.num_nodes {
                return Err(GraphError::Argument(
                    "node attribute count != node count".into(),
                ));
            }
        }
        if let Some(el) = &self.edge_labels {
            if el.len() != self.edges.len() {
                return Err(GraphError::Argument(
                    "edge label count != edge count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Node feature schema of a dataset: exactly one of the two variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NodeFeatures {
    /// Categorical labels with the given vocabulary size.
    Labels { num_classes: usize },
    /// Float attribute vectors of the given dimension.
    Attributes { dim: usize },
}

/// A collection of graphs sharing one feature/target schema.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub node_features: NodeFeatures,
    /// Edge label vocabulary size; 0 when the dataset has no edge labels.
    pub num_edge_classes: usize,
    pub target_kind: TargetKind,
    pub stats: LoadStats,
}

impl GraphDataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_node_classes(&self) -> usize {
        match self.node_features {
            NodeFeatures::Labels { num_classes } => num_classes,
            NodeFeatures::Attributes { .. } => 0,
        }
    }

    pub fn node_attr_dim(&self) -> usize {
        match self.node_features {
            NodeFeatures::Labels { .. } => 0,
            NodeFeatures::Attributes { dim } => dim,
        }
    }

    /// Class labels of all graphs; `None` unless every graph carries a
    /// classification target.
    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.graphs
            .iter()
            .map(|g| match g.graph_target {
                Some(Target::Class(c)) => Some(c),
                _ => None,
            })
            .collect()
    }

    /// Checks schema conformance of every graph against the dataset header.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (i, g) in self.graphs.iter().enumerate() {
            g.validate()
                .map_err(|e| GraphError::Argument(format!("graph {i}: {e}")))?;
            match self.node_features {
                NodeFeatures::Labels { num_classes } => {
                    let labels = g.node_labels.as_ref().ok_or_else(|| {
                        GraphError::Argument(format!("graph {i} missing node labels"))
                    })?;
                    if g.node_attributes.is_some() {
                        return Err(GraphError::Argument(format!(
                            "graph {i} has attributes in a label-valued dataset"
                        )));
                    }
                    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
                        return Err(GraphError::Argument(format!(
                            "graph {i} node label {l} >= vocabulary {num_classes}"
                        )));
                    }
                }
                NodeFeatures::Attributes { dim } => {
                    let attrs = g.node_attributes.as_ref().ok_or_else(|| {
                        GraphError::Argument(format!("graph {i} missing node attributes"))
                    })?;
                    if g.node_labels.is_some() {
                        return Err(GraphError::Argument(format!(
                            "graph {i} has labels in an attribute-valued dataset"
                        )));
                    }
                    if attrs.iter().any(|a| a.len() != dim) {
                        return Err(GraphError::Argument(format!(
                            "graph {i} attribute dimension != {dim}"
                        )));
                    }
                }
            }
            if self.num_edge_classes > 0 {
                let el = g.edge_labels.as_ref().ok_or_else(|| {
                    GraphError::Argument(format!("graph {i} missing edge labels"))
                })?;
                if let Some(&l) = el.iter().find(|&&l| l >= self.num_edge_classes) {
                    return Err(GraphError::Argument(format!(
                        "graph {i} edge label {l} >= vocabulary {}",
                        self.num_edge_classes
                    )));
                }
            } else if g.edge_labels.is_some() {
                return Err(GraphError::Argument(format!(
                    "graph {i} has edge labels but the dataset schema has none"
                )));
            }
            match (self.target_kind, g.graph_target) {
                (TargetKind::Classification { num_classes }, Some(Target::Class(c))) => {
                    if c >= num_classes {
                        return Err(GraphError::Argument(format!(
                            "graph {i} class {c} >= {num_classes}"
                        )));
                    }
                }
                (TargetKind::Regression, Some(Target::Value(_))) => {}
                (TargetKind::None, None) => {}
                (kind, got) => {
                    return Err(GraphError::Argument(format!(
                        "graph {i} target {got:?} does not match dataset kind {kind:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Remaps arbitrary integer labels to `0..k` preserving sorted order of the
/// distinct originals. Returns the remapped labels and `k`.
pub(crate) fn remap_sorted(raw: &[i64]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<i64> = raw.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let index = |v: i64| distinct.binary_search(&v).unwrap();
    (raw.iter().map(|&v| index(v)).collect(), distinct.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remap_preserves_sorted_order() {
        let (mapped, k) = remap_sorted(&[1, -1, 1, 5]);
        assert_eq!(k, 3);
        assert_eq!(mapped, vec![1, 0, 1, 2]);
    }

    #[test]
    fn raw_edges_drop_loops_and_duplicates() {
        let mut stats = LoadStats::default();
        let raw = [(0, 1), (1, 0), (2, 2), (1, 2)];
        let (edges, labels) = Graph::from_raw_edges(3, &raw, None, &mut stats).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert!(labels.is_none());
        assert_eq!(stats.self_loops_dropped, 1);
        assert_eq!(stats.duplicate_edges_dropped, 1);
    }

    #[test]
    fn raw_edges_keep_first_label_of_duplicates() {
        let mut stats = LoadStats::default();
        let raw = [(0, 1), (1, 2), (1, 0)];
        let (edges, labels) = Graph::from_raw_edges(3, &raw, Some(&[7, 5, 9]), &mut stats).unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        assert_eq!(labels, Some(vec![7, 5]));
    }

    #[test]
    fn raw_edges_report_out_of_range_index() {
        let mut stats = LoadStats::default();
        assert_eq!(
            Graph::from_raw_edges(3, &[(0, 1), (0, 3)], None, &mut stats),
            Err(1)
        );
    }
}
