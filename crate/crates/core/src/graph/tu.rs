//! Parser for the TU Dortmund benchmark format.
//!
//! The format is a set of plain-text files sharing a dataset name prefix:
//!
//! * `{name}_A.txt` — comma-separated 1-based node-id pairs, one edge per
//!   line, with both directions of each undirected edge present;
//! * `{name}_graph_indicator.txt` — line `i` is the 1-based graph id of
//!   node `i`;
//! * `{name}_graph_labels.txt` — line `g` is the integer label of graph `g`;
//! * `{name}_node_labels.txt` (optional) — line `i` is the label of node `i`;
//! * `{name}_edge_labels.txt` (optional) — line `e` is the label of edge `e`,
//!   aligned with the lines of `{name}_A.txt`;
//! * `{name}_node_attributes.txt` (optional) — line `i` is a comma-separated
//!   float vector for node `i`.
//!
//! Whitespace around commas is tolerated. Duplicate undirected edges and
//! self-loops are dropped and counted rather than rejected, since the format
//! itself duplicates each edge. Categorical labels (graph, node, edge) are
//! remapped to contiguous ids preserving the sorted order of the original
//! values.

use std::path::Path;

use super::{
    remap_sorted, Graph, GraphDataset, GraphError, LoadStats, NodeFeatures, Target, TargetKind,
};

fn read_lines(dir: &Path, file: &str, mandatory: bool) -> Result<Option<Vec<String>>, GraphError> {
    let path = dir.join(file);
    if !path.exists() {
        if mandatory {
            return Err(GraphError::Format(format!("missing mandatory file {file}")));
        }
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
    ))
}

fn parse_int(token: &str, file: &str, line: usize) -> Result<i64, GraphError> {
    token.trim().parse::<i64>().map_err(|_| {
        GraphError::parse(
            format!("{file}:{line}"),
            format!("expected integer, got {token:?}"),
        )
    })
}

fn parse_float(token: &str, file: &str, line: usize) -> Result<f64, GraphError> {
    token.trim().parse::<f64>().map_err(|_| {
        GraphError::parse(
            format!("{file}:{line}"),
            format!("expected float, got {token:?}"),
        )
    })
}

/// Loads `{name}_*.txt` from `directory` into a normalized dataset: nodes
/// reindexed to 0-based contiguous ids per graph, duplicate edges removed,
/// graph labels remapped to `0..C` preserving sorted original order.
pub fn parse_tu_dataset(directory: &Path, name: &str) -> Result<GraphDataset, GraphError> {
    let a_file = format!("{name}_A.txt");
    let ind_file = format!("{name}_graph_indicator.txt");
    let gl_file = format!("{name}_graph_labels.txt");
    let nl_file = format!("{name}_node_labels.txt");
    let el_file = format!("{name}_edge_labels.txt");
    let na_file = format!("{name}_node_attributes.txt");

    let a_lines = read_lines(directory, &a_file, true)?.unwrap();
    let ind_lines = read_lines(directory, &ind_file, true)?.unwrap();
    let gl_lines = read_lines(directory, &gl_file, true)?.unwrap();
    let nl_lines = read_lines(directory, &nl_file, false)?;
    let el_lines = read_lines(directory, &el_file, false)?;
    let na_lines = read_lines(directory, &na_file, false)?;

    match (&nl_lines, &na_lines) {
        (None, None) => {
            return Err(GraphError::Format(format!(
                "dataset {name} provides neither {nl_file} nor {na_file}; exactly one is required"
            )))
        }
        (Some(_), Some(_)) => {
            return Err(GraphError::Format(format!(
                "dataset {name} provides both {nl_file} and {na_file}; exactly one is required"
            )))
        }
        _ => {}
    }

    // Node -> graph assignment. Nodes are 1-based in the files.
    let num_nodes_total = ind_lines.len();
    let num_graphs = gl_lines.len();
    let mut graph_of = Vec::with_capacity(num_nodes_total);
    for (i, line) in ind_lines.iter().enumerate() {
        let gid = parse_int(line, &ind_file, i + 1)?;
        if gid < 1 || gid as usize > num_graphs {
            return Err(GraphError::integrity(
                format!("{ind_file}:{}", i + 1),
                format!("graph id {gid} outside 1..={num_graphs}"),
            ));
        }
        graph_of.push(gid as usize - 1);
    }

    // Local 0-based node ids within each graph, assigned in file order.
    let mut local_id = Vec::with_capacity(num_nodes_total);
    let mut graph_sizes = vec![0usize; num_graphs];
    for &g in &graph_of {
        local_id.push(graph_sizes[g]);
        graph_sizes[g] += 1;
    }
    if let Some(&(idx, _)) = graph_sizes
        .iter()
        .enumerate()
        .find(|&(_, &s)| s == 0)
        .as_ref()
    {
        return Err(GraphError::integrity(
            ind_file.to_string(),
            format!("graph {} has no nodes", idx + 1),
        ));
    }

    // Edges, grouped per graph, along with raw edge labels if present.
    let mut raw_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let mut raw_edge_labels: Vec<Vec<i64>> = vec![Vec::new(); num_graphs];
    if let Some(el) = &el_lines {
        if el.len() != a_lines.len() {
            return Err(GraphError::Format(format!(
                "{el_file} has {} lines but {a_file} has {}",
                el.len(),
                a_lines.len()
            )));
        }
    }
    for (i, line) in a_lines.iter().enumerate() {
        let lineno = i + 1;
        let mut parts = line.split(',');
        let (u_tok, v_tok) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => {
                return Err(GraphError::parse(
                    format!("{a_file}:{lineno}"),
                    format!("expected two comma-separated node ids, got {line:?}"),
                ))
            }
        };
        let u = parse_int(u_tok, &a_file, lineno)?;
        let v = parse_int(v_tok, &a_file, lineno)?;
        for id in [u, v] {
            if id < 1 || id as usize > num_nodes_total {
                return Err(GraphError::integrity(
                    format!("{a_file}:{lineno}"),
                    format!("node id {id} outside 1..={num_nodes_total}"),
                ));
            }
        }
        let (u, v) = (u as usize - 1, v as usize - 1);
        if graph_of[u] != graph_of[v] {
            return Err(GraphError::integrity(
                format!("{a_file}:{lineno}"),
                format!(
                    "edge ({}, {}) crosses graphs {} and {}",
                    u + 1,
                    v + 1,
                    graph_of[u] + 1,
                    graph_of[v] + 1
                ),
            ));
        }
        let g = graph_of[u];
        raw_edges[g].push((local_id[u], local_id[v]));
        if let Some(el) = &el_lines {
            raw_edge_labels[g].push(parse_int(&el[i], &el_file, lineno)?);
        }
    }

    // Node labels or attributes, scattered per graph.
    let mut node_labels_raw: Option<Vec<Vec<i64>>> = None;
    let mut node_attrs: Option<Vec<Vec<Vec<f64>>>> = None;
    if let Some(nl) = &nl_lines {
        if nl.len() != num_nodes_total {
            return Err(GraphError::Format(format!(
                "{nl_file} has {} lines but {ind_file} has {num_nodes_total}",
                nl.len()
            )));
        }
        let mut per_graph: Vec<Vec<i64>> = vec![Vec::new(); num_graphs];
        for (i, line) in nl.iter().enumerate() {
            per_graph[graph_of[i]].push(parse_int(line, &nl_file, i + 1)?);
        }
        node_labels_raw = Some(per_graph);
    }
    if let Some(na) = &na_lines {
        if na.len() != num_nodes_total {
            return Err(GraphError::Format(format!(
                "{na_file} has {} lines but {ind_file} has {num_nodes_total}",
                na.len()
            )));
        }
        let mut per_graph: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_graphs];
        let mut dim = None;
        for (i, line) in na.iter().enumerate() {
            let vec: Vec<f64> = line
                .split(',')
                .map(|t| parse_float(t, &na_file, i + 1))
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(GraphError::Format(format!(
                        "{na_file}:{} has {} values, expected {d}",
                        i + 1,
                        vec.len()
                    )))
                }
                _ => {}
            }
            per_graph[graph_of[i]].push(vec);
        }
        node_attrs = Some(per_graph);
    }

    // Remap categorical vocabularies over the whole dataset.
    let (node_features, node_labels) = match &node_labels_raw {
        Some(per_graph) => {
            let flat: Vec<i64> = per_graph.iter().flatten().copied().collect();
            let (mapped, k) = remap_sorted(&flat);
            let mut iter = mapped.into_iter();
            let per: Vec<Vec<usize>> = per_graph
                .iter()
                .map(|g| (0..g.len()).map(|_| iter.next().unwrap()).collect())
                .collect();
            (NodeFeatures::Labels { num_classes: k }, Some(per))
        }
        None => {
            let dim = node_attrs
                .as_ref()
                .unwrap()
                .iter()
                .flatten()
                .next()
                .map_or(0, Vec::len);
            (NodeFeatures::Attributes { dim }, None)
        }
    };

    let graph_labels_raw: Vec<i64> = gl_lines
        .iter()
        .enumerate()
        .map(|(g, line)| parse_int(line, &gl_file, g + 1))
        .collect::<Result<_, _>>()?;
    let (graph_classes, num_graph_classes) = remap_sorted(&graph_labels_raw);

    // Edge label vocabulary, remapped after deduplication below would lose
    // occurrences, so remap over the raw stream first.
    let (edge_label_map, num_edge_classes) = if el_lines.is_some() {
        let mut distinct: Vec<i64> = raw_edge_labels.iter().flatten().copied().collect();
        distinct.sort_unstable();
        distinct.dedup();
        // An edge-label file with no edges normalizes to "no edge labels".
        if distinct.is_empty() {
            (None, 0)
        } else {
            let k = distinct.len();
            (Some(distinct), k)
        }
    } else {
        (None, 0)
    };

    let mut stats = LoadStats::default();
    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let mapped_labels: Option<Vec<usize>> = edge_label_map.as_ref().map(|distinct| {
            raw_edge_labels[g]
                .iter()
                .map(|v| distinct.binary_search(v).unwrap())
                .collect()
        });
        let (edges, edge_labels) = Graph::from_raw_edges(
            graph_sizes[g],
            &raw_edges[g],
            mapped_labels.as_deref(),
            &mut stats,
        )
        .map_err(|idx| {
            GraphError::integrity(
                a_file.to_string(),
                format!("edge {idx} of graph {} is out of range", g + 1),
            )
        })?;
        graphs.push(Graph {
            num_nodes: graph_sizes[g],
            edges,
            node_labels: node_labels.as_ref().map(|per| per[g].clone()),
            node_attributes: node_attrs.as_ref().map(|per| per[g].clone()),
            edge_labels,
            graph_target: Some(Target::Class(graph_classes[g])),
        });
    }

    let dataset = GraphDataset {
        graphs,
        node_features,
        num_edge_classes,
        target_kind: TargetKind::Classification {
            num_classes: num_graph_classes,
        },
        stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, files: &[(&str, &str)]) {
        std::fs::create_dir_all(dir).unwrap();
        for (name, content) in files {
            std::fs::write(dir.join(name), content).unwrap();
        }
    }

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("gmae-tu-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    /// Triangle with node labels [0,1,0] plus a single-edge pair; graph
    /// labels 1 and -1.
    fn two_graph_fixture(dir: &Path) {
        write_fixture(
            dir,
            &[
                (
                    "T_A.txt",
                    "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
                ),
                ("T_graph_indicator.txt", "1\n1\n1\n2\n2\n"),
                ("T_graph_labels.txt", "1\n-1\n"),
                ("T_node_labels.txt", "0\n1\n0\n0\n0\n"),
            ],
        );
    }

    #[test]
    fn parses_two_graph_fixture() {
        let dir = tmpdir("basic");
        two_graph_fixture(&dir);
        let ds = parse_tu_dataset(&dir, "T").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_node_classes(), 2);
        assert_eq!(
            ds.target_kind,
            TargetKind::Classification { num_classes: 2 }
        );
        // label 1 -> class 1, label -1 -> class 0 (sorted original order)
        assert_eq!(ds.graphs[0].graph_target, Some(Target::Class(1)));
        assert_eq!(ds.graphs[1].graph_target, Some(Target::Class(0)));
        assert_eq!(ds.graphs[0].edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(ds.graphs[1].edges, vec![(0, 1)]);
        assert_eq!(ds.graphs[0].node_labels, Some(vec![0, 1, 0]));
        assert_eq!(ds.stats.duplicate_edges_dropped, 4);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_mandatory_file_is_format_error() {
        let dir = tmpdir("missing");
        write_fixture(&dir, &[("T_A.txt", "1, 2\n")]);
        let err = parse_tu_dataset(&dir, "T").unwrap_err();
        assert!(matches!(err, GraphError::Format(ref m) if m.contains("T_graph_indicator.txt")));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn cross_graph_edge_is_integrity_error_with_line() {
        let dir = tmpdir("cross");
        write_fixture(
            &dir,
            &[
                ("T_A.txt", "1, 2\n2, 1\n3, 4\n"),
                ("T_graph_indicator.txt", "1\n1\n1\n2\n"),
                ("T_graph_labels.txt", "1\n2\n"),
                ("T_node_labels.txt", "0\n0\n0\n0\n"),
            ],
        );
        let err = parse_tu_dataset(&dir, "T").unwrap_err();
        match err {
            GraphError::Integrity { location, .. } => assert_eq!(location, "T_A.txt:3"),
            other => panic!("expected integrity error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn non_integer_token_is_parse_error_with_line() {
        let dir = tmpdir("parse");
        write_fixture(
            &dir,
            &[
                ("T_A.txt", "1, 2\nx, 1\n"),
                ("T_graph_indicator.txt", "1\n1\n"),
                ("T_graph_labels.txt", "1\n"),
                ("T_node_labels.txt", "0\n0\n"),
            ],
        );
        let err = parse_tu_dataset(&dir, "T").unwrap_err();
        match err {
            GraphError::Parse { location, .. } => assert_eq!(location, "T_A.txt:2"),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn neither_labels_nor_attributes_is_format_error() {
        let dir = tmpdir("nofeat");
        write_fixture(
            &dir,
            &[
                ("T_A.txt", "1, 2\n"),
                ("T_graph_indicator.txt", "1\n1\n"),
                ("T_graph_labels.txt", "1\n"),
            ],
        );
        assert!(matches!(
            parse_tu_dataset(&dir, "T").unwrap_err(),
            GraphError::Format(_)
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn edge_labels_align_with_kept_edges() {
        let dir = tmpdir("elabels");
        write_fixture(
            &dir,
            &[
                ("T_A.txt", "1, 2\n2, 1\n2, 3\n3, 2\n"),
                ("T_graph_indicator.txt", "1\n1\n1\n"),
                ("T_graph_labels.txt", "1\n"),
                ("T_node_labels.txt", "0\n0\n0\n"),
                ("T_edge_labels.txt", "5\n5\n7\n7\n"),
            ],
        );
        let ds = parse_tu_dataset(&dir, "T").unwrap();
        assert_eq!(ds.num_edge_classes, 2);
        assert_eq!(ds.graphs[0].edge_labels, Some(vec![0, 1]));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
