//! Synthetic graph generators: Erdős–Rényi graphs for memory profiling and
//! a deterministic molecule-like benchmark stand-in for desk-scale runs.

use rand::Rng;

use super::{Graph, GraphDataset, LoadStats, NodeFeatures, Target, TargetKind};
use crate::rng::{self, Prng};

/// Erdős–Rényi graph on `n` nodes with edge probability `p` and node labels
/// drawn uniformly from `num_node_classes`.
pub fn er_graph(rng: &mut Prng, n: usize, p: f64, num_node_classes: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let node_labels = (0..n).map(|_| rng.gen_range(0..num_node_classes)).collect();
    Graph {
        num_nodes: n,
        edges,
        node_labels: Some(node_labels),
        node_attributes: None,
        edge_labels: None,
        graph_target: None,
    }
}

/// Dataset of one ER graph, as used by the memory profiler.
pub fn er_dataset(seed: u64, n: usize, p: f64, num_node_classes: usize) -> GraphDataset {
    let mut rng = rng::seeded(seed);
    GraphDataset {
        graphs: vec![er_graph(&mut rng, n, p, num_node_classes)],
        node_features: NodeFeatures::Labels {
            num_classes: num_node_classes,
        },
        num_edge_classes: 0,
        target_kind: TargetKind::None,
        stats: LoadStats::default(),
    }
}

/// Deterministic molecule-like binary classification dataset at benchmark
/// scale: 188 graphs (125 positive / 63 negative), 10–28 nodes each with a
/// mean around 18, 7 node label types and 4 edge label types.
///
/// Positive graphs are built from two fused rings with short tails and a
/// label mixture skewed towards low ids; negative graphs are a single ring
/// with longer tails and a mixture skewed higher. The class signal therefore
/// lives in both structure (ring density, degrees) and feature statistics,
/// which is what the self-supervised encoder is expected to surface.
pub fn molecule_benchmark(seed: u64) -> GraphDataset {
    let mut rng = rng::seeded(seed);
    let mut graphs = Vec::with_capacity(188);
    for i in 0..188 {
        let positive = i < 125;
        graphs.push(molecule_graph(&mut rng, positive));
    }
    // Interleave classes deterministically so folds stay balanced.
    rng::shuffle(&mut rng, &mut graphs);
    GraphDataset {
        graphs,
        node_features: NodeFeatures::Labels { num_classes: 7 },
        num_edge_classes: 4,
        target_kind: TargetKind::Classification { num_classes: 2 },
        stats: LoadStats::default(),
    }
}

fn molecule_graph(rng: &mut Prng, positive: bool) -> Graph {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut ring_edge = Vec::new(); // parallel to edges: in-ring flag

    // Ring backbone. Positives fuse a second ring onto the first.
    let ring_a = rng.gen_range(5..=7);
    for k in 0..ring_a {
        edges.push((k, (k + 1) % ring_a));
        ring_edge.push(true);
    }
    let mut n = ring_a;
    if positive {
        let ring_b = rng.gen_range(4..=6);
        // Fuse at the shared edge (0, 1): the new ring runs 0 -> new nodes -> 1.
        let mut prev = 0;
        for _ in 0..ring_b - 2 {
            edges.push((prev, n));
            ring_edge.push(true);
            prev = n;
            n += 1;
        }
        edges.push((prev, 1));
        ring_edge.push(true);
    }

    // Tails: negatives grow longer chains.
    let tail_budget = if positive {
        rng.gen_range(5..=12)
    } else {
        rng.gen_range(9..=17)
    };
    let mut remaining = tail_budget;
    while remaining > 0 {
        let anchor = rng.gen_range(0..n);
        let len = rng.gen_range(1..=remaining.min(4));
        let mut prev = anchor;
        for _ in 0..len {
            edges.push((prev, n));
            ring_edge.push(false);
            prev = n;
            n += 1;
        }
        remaining -= len;
    }

    // Label mixtures differ by class but overlap heavily, so labels alone
    // do not give the class away; most of the signal is structural.
    let node_labels = (0..n)
        .map(|_| {
            let r: f64 = rng.gen();
            let cdf: [f64; 7] = if positive {
                [0.35, 0.55, 0.70, 0.80, 0.88, 0.95, 1.0]
            } else {
                [0.30, 0.42, 0.60, 0.72, 0.84, 0.93, 1.0]
            };
            cdf.iter().position(|&c| r < c).unwrap_or(6)
        })
        .collect();

    // Edge labels follow ring membership with some noise.
    let raw_edge_labels: Vec<usize> = ring_edge
        .iter()
        .map(|&in_ring| {
            let noise = rng.gen_range(0..2);
            if in_ring {
                noise
            } else {
                2 + noise
            }
        })
        .collect();

    let mut stats = LoadStats::default();
    let (edges, edge_labels) = Graph::from_raw_edges(n, &edges, Some(&raw_edge_labels), &mut stats)
        .expect("generator emits in-range edges");
    Graph {
        num_nodes: n,
        edges,
        node_labels: Some(node_labels),
        node_attributes: None,
        edge_labels,
        graph_target: Some(Target::Class(usize::from(positive))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn er_graph_is_valid_and_deterministic() {
        let a = er_dataset(3, 30, 0.2, 4);
        let b = er_dataset(3, 30, 0.2, 4);
        assert_eq!(a.graphs, b.graphs);
        a.validate().unwrap();
    }

    #[test]
    fn benchmark_fixture_matches_target_statistics() {
        let ds = molecule_benchmark(2024);
        ds.validate().unwrap();
        assert_eq!(ds.len(), 188);
        let positives = ds
            .graphs
            .iter()
            .filter(|g| g.graph_target == Some(Target::Class(1)))
            .count();
        assert_eq!(positives, 125);
        let mean_nodes: f64 =
            ds.graphs.iter().map(|g| g.num_nodes as f64).sum::<f64>() / ds.len() as f64;
        assert!(
            (16.0..=20.0).contains(&mean_nodes),
            "mean node count {mean_nodes} out of range"
        );
        assert_eq!(ds.num_node_classes(), 7);
        assert_eq!(ds.num_edge_classes, 4);
    }

    #[test]
    fn benchmark_fixture_is_deterministic() {
        let a = molecule_benchmark(7);
        let b = molecule_benchmark(7);
        assert_eq!(a.graphs, b.graphs);
    }
}
