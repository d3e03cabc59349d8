//! Shared fixtures for integration tests. Each test binary uses its
//! own subset.
#![allow(dead_code)]

use gmae_core::graph::{Graph, GraphDataset, LoadStats, NodeFeatures, Target, TargetKind};
use gmae_core::rng::{self, Prng};
use rand::Rng;

/// Node label determined by degree: 0 for leaves, 1 for degree two,
/// 2 otherwise. Reconstruction of masked labels is then a pure function of
/// structure the model can read off the centrality encoding.
pub fn degree_labels(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut deg = vec![0usize; n];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    deg.iter()
        .map(|&d| {
            if d == 1 {
                0
            } else if d == 2 {
                1
            } else {
                2
            }
        })
        .collect()
}

fn graph(n: usize, edges: Vec<(usize, usize)>, target: Option<Target>) -> Graph {
    let node_labels = Some(degree_labels(n, &edges));
    Graph {
        num_nodes: n,
        edges,
        node_labels,
        node_attributes: None,
        edge_labels: None,
        graph_target: target,
    }
}

/// Five small structurally distinct graphs whose labels are degree-derived;
/// a model can drive the masked reconstruction loss to zero on them.
pub fn toy_pretrain_set() -> GraphDataset {
    let graphs = vec![
        graph(4, vec![(0, 1), (1, 2), (2, 3)], None),
        graph(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)], None),
        graph(5, vec![(0, 1), (0, 4), (1, 2), (2, 3), (3, 4)], None),
        graph(3, vec![(0, 1), (1, 2)], None),
        graph(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)], None),
    ];
    GraphDataset {
        graphs,
        node_features: NodeFeatures::Labels { num_classes: 3 },
        num_edge_classes: 0,
        target_kind: TargetKind::None,
        stats: LoadStats::default(),
    }
}

/// Twenty random connected graphs with target = mean degree / 4, a pooled
/// structural statistic a linear head over the encoder can regress.
pub fn toy_regression_set() -> GraphDataset {
    let mut rng = rng::seeded(70);
    let mut graphs = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(4..=9);
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|j| (j, j + 1)).collect();
        let extra = rng.gen_range(0..=n);
        for _ in 0..extra * 3 {
            if edges.len() >= n * (n - 1) / 2 {
                break;
            }
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if !edges.contains(&key) {
                edges.push(key);
            }
        }
        edges.sort_unstable();
        let mean_degree = 2.0 * edges.len() as f64 / n as f64;
        graphs.push(graph(n, edges, Some(Target::Value(mean_degree / 4.0))));
    }
    GraphDataset {
        graphs,
        node_features: NodeFeatures::Labels { num_classes: 3 },
        num_edge_classes: 0,
        target_kind: TargetKind::Regression,
        stats: LoadStats::default(),
    }
}

/// Uniform random graph on up to `max_nodes` nodes with the given edge
/// probability; labels uniform over 3 classes, optional edge labels over 4.
pub fn random_graph(rng: &mut Prng, max_nodes: usize, p: f64, edge_labels: bool) -> Graph {
    let n = rng.gen_range(2..=max_nodes);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let el = edge_labels.then(|| edges.iter().map(|_| rng.gen_range(0..4)).collect());
    Graph {
        num_nodes: n,
        edges,
        node_labels: Some(labels),
        node_attributes: None,
        edge_labels: el,
        graph_target: None,
    }
}
