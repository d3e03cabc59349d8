//! Regenerates the bundled synthetic benchmark dataset under `data/`.
//!
//! The dataset is written in TU format so the CLI examples in the README
//! run out of the box. Generation is fully deterministic; re-running this
//! reproduces identical files.
//!
//! Usage: `cargo run -p gmae-core --example gen_fixtures [out_dir]`

use std::fmt::Write as _;
use std::path::PathBuf;

use gmae_core::graph::synth::molecule_benchmark;
use gmae_core::graph::Target;

const SEED: u64 = 2024;
const NAME: &str = "MOLSYNTH";

fn main() {
    let out_root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    let dir = out_root.join(NAME);
    std::fs::create_dir_all(&dir).expect("create output directory");

    let dataset = molecule_benchmark(SEED);
    let mut a = String::new();
    let mut indicator = String::new();
    let mut graph_labels = String::new();
    let mut node_labels = String::new();
    let mut edge_labels = String::new();

    let mut node_base = 0usize; // 1-based global node ids
    for (gi, g) in dataset.graphs.iter().enumerate() {
        let class = match g.graph_target {
            Some(Target::Class(c)) => c,
            _ => unreachable!("generator emits class targets"),
        };
        writeln!(graph_labels, "{class}").unwrap();
        for &l in g.node_labels.as_ref().unwrap() {
            writeln!(node_labels, "{l}").unwrap();
            writeln!(indicator, "{}", gi + 1).unwrap();
        }
        let labels = g.edge_labels.as_ref().unwrap();
        for (&(u, v), &l) in g.edges.iter().zip(labels) {
            // TU format lists both directions of each undirected edge.
            writeln!(a, "{}, {}", node_base + u + 1, node_base + v + 1).unwrap();
            writeln!(edge_labels, "{l}").unwrap();
            writeln!(a, "{}, {}", node_base + v + 1, node_base + u + 1).unwrap();
            writeln!(edge_labels, "{l}").unwrap();
        }
        node_base += g.num_nodes;
    }

    let files = [
        (format!("{NAME}_A.txt"), a),
        (format!("{NAME}_graph_indicator.txt"), indicator),
        (format!("{NAME}_graph_labels.txt"), graph_labels),
        (format!("{NAME}_node_labels.txt"), node_labels),
        (format!("{NAME}_edge_labels.txt"), edge_labels),
    ];
    for (name, content) in files {
        std::fs::write(dir.join(&name), content).expect("write fixture file");
        println!("wrote {}", dir.join(&name).display());
    }
    println!("{} graphs, {} nodes total", dataset.len(), node_base);
}
