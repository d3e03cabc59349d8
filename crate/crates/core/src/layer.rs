//! The backbone transformer layer and its three graph encodings.
//!
//! * centrality encoding: a learnable per-degree embedding added to the
//!   node inputs (degrees clamped to `max_degree`);
//! * spatial encoding: a learnable per-head scalar indexed by clamped
//!   shortest-path distance, added to the attention logits, with a
//!   dedicated (learnable) entry for unreachable pairs;
//! * edge encoding: for each node pair, the dot products of the edge-type
//!   embeddings along the stored shortest path with per-hop weight vectors,
//!   averaged over the path, shared across heads.
//!
//! Blocks are pre-norm residual: `h1 = h + attn(ln(h))`,
//! `out = h1 + ffn(ln(h1))` with `ffn(x) = max(0, x W1 + b1) W2 + b2`.
//! The bias enters the logits after the `1/sqrt(d_head)` scaling, i.e. in
//! logit units.

use crate::graph::{EncodedGraph, UNREACHABLE};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, PathTerms, Tape, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;

/// Parameter-store indices of one transformer layer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerParams {
    pub w_q: Vec<usize>,
    pub w_k: Vec<usize>,
    pub w_v: Vec<usize>,
    pub w_o: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub heads: usize,
    pub d_head: usize,
}

fn normal_tensor<F: Scalar>(rng: &mut Prng, shape: Vec<usize>) -> Tensor<F> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng::trunc_normal(rng, INIT_STD))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn ones_tensor<F: Scalar>(len: usize) -> Tensor<F> {
    Tensor::new(vec![len], vec![F::one(); len]).unwrap()
}

impl LayerParams {
    /// Registers one layer's parameters. `d` must be divisible by `heads`;
    /// the feed-forward width is `d_ff`.
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut Prng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        assert_eq!(
            d % heads,
            0,
            "hidden dim {d} not divisible by {heads} heads"
        );
        let d_head = d / heads;
        let proj = |store: &mut ParamStore<F>, rng: &mut Prng, name: String| {
            store.push(name, normal_tensor(rng, vec![d, d_head]), true)
        };
        let w_q = (0..heads)
            .map(|h| proj(store, rng, format!("{prefix}.w_q.{h}")))
            .collect();
        let w_k = (0..heads)
            .map(|h| proj(store, rng, format!("{prefix}.w_k.{h}")))
            .collect();
        let w_v = (0..heads)
            .map(|h| proj(store, rng, format!("{prefix}.w_v.{h}")))
            .collect();
        let w_o = store.push(
            format!("{prefix}.w_o"),
            normal_tensor(rng, vec![d, d]),
            true,
        );
        let w1 = store.push(
            format!("{prefix}.w1"),
            normal_tensor(rng, vec![d, d_ff]),
            true,
        );
        let b1 = store.push(format!("{prefix}.b1"), Tensor::zeros(vec![d_ff]), false);
        let w2 = store.push(
            format!("{prefix}.w2"),
            normal_tensor(rng, vec![d_ff, d]),
            true,
        );
        let b2 = store.push(format!("{prefix}.b2"), Tensor::zeros(vec![d]), false);
        let ln1_gain = store.push(format!("{prefix}.ln1.gain"), ones_tensor(d), false);
        let ln1_bias = store.push(format!("{prefix}.ln1.bias"), Tensor::zeros(vec![d]), false);
        let ln2_gain = store.push(format!("{prefix}.ln2.gain"), ones_tensor(d), false);
        let ln2_bias = store.push(format!("{prefix}.ln2.bias"), Tensor::zeros(vec![d]), false);
        LayerParams {
            w_q,
            w_k,
            w_v,
            w_o,
            w1,
            b1,
            w2,
            b2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            heads,
            d_head,
        }
    }
}

/// Parameter-store indices of one stack's encoding tables. Encoder and
/// decoder each own a full set.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncodingTables {
    /// `(max_degree + 1) x d`; row `min(degree, max_degree)` is added to
    /// the node input.
    pub centrality: usize,
    /// `heads x (max_spd + 2)`; entries `0..=max_spd` index clamped
    /// distances, the last entry is the unreachable sentinel.
    pub spatial: usize,
    pub edge: Option<EdgeTables>,
    pub max_degree: usize,
    pub max_spd: u32,
}

/// Edge-encoding tables: type embeddings and per-hop weight vectors, both
/// of width `d_edge` (fixed to the hidden width here).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EdgeTables {
    pub edge_types: usize,
    pub hop_weights: usize,
}

impl EncodingTables {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut Prng,
        prefix: &str,
        d: usize,
        heads: usize,
        max_degree: usize,
        max_spd: u32,
        num_edge_classes: usize,
    ) -> Self {
        let centrality = store.push(
            format!("{prefix}.centrality"),
            normal_tensor(rng, vec![max_degree + 1, d]),
            false,
        );
        // Spatial entries are additive biases: start neutral.
        let spatial = store.push(
            format!("{prefix}.spatial"),
            Tensor::zeros(vec![heads, max_spd as usize + 2]),
            false,
        );
        let edge = (num_edge_classes > 0).then(|| EdgeTables {
            edge_types: store.push(
                format!("{prefix}.edge_types"),
                normal_tensor(rng, vec![num_edge_classes, d]),
                false,
            ),
            hop_weights: store.push(
                format!("{prefix}.hop_weights"),
                normal_tensor(rng, vec![max_spd as usize, d]),
                false,
            ),
        });
        EncodingTables {
            centrality,
            spatial,
            edge,
            max_degree,
            max_spd,
        }
    }

    fn spatial_index(&self, spd: u32) -> u32 {
        if spd == UNREACHABLE {
            self.max_spd + 1
        } else {
            spd.min(self.max_spd)
        }
    }
}

/// Adds the per-degree centrality embedding to every row of `x`.
pub fn centrality_encode<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    degrees: &[usize],
    tables: &EncodingTables,
    vars: &[Var],
) -> Result<Var, TensorError> {
    let ids: Vec<usize> = degrees.iter().map(|&d| d.min(tables.max_degree)).collect();
    let offsets = tape.embedding_lookup(vars[tables.centrality], &ids)?;
    tape.add(x, offsets)
}

/// Builds the `heads x n x n` attention-bias matrix for a full graph.
/// Spatial and edge terms superpose; the edge term is zero on the diagonal,
/// for unreachable pairs, and when the dataset has no edge labels.
pub fn build_bias<F: Scalar>(
    tape: &mut Tape<F>,
    enc: &EncodedGraph,
    edge_labels: Option<&[usize]>,
    tables: &EncodingTables,
    vars: &[Var],
) -> Result<Var, TensorError> {
    build_bias_subset(tape, enc, edge_labels, tables, vars, None)
}

/// Like [`build_bias`], but selecting the `subset x subset` submatrix of the
/// full-graph bias. Distances and paths always come from the full graph;
/// only the rows/columns are restricted.
pub fn build_bias_subset<F: Scalar>(
    tape: &mut Tape<F>,
    enc: &EncodedGraph,
    edge_labels: Option<&[usize]>,
    tables: &EncodingTables,
    vars: &[Var],
    subset: Option<&[usize]>,
) -> Result<Var, TensorError> {
    let full: Vec<usize>;
    let nodes: &[usize] = match subset {
        Some(s) => s,
        None => {
            full = (0..enc.num_nodes).collect();
            &full
        }
    };
    let k = nodes.len();

    let mut index = Vec::with_capacity(k * k);
    for &i in nodes {
        for &j in nodes {
            index.push(tables.spatial_index(enc.spd(i, j)));
        }
    }
    let spatial = tape.gather_bias(vars[tables.spatial], &index, k)?;

    match (&tables.edge, edge_labels) {
        (Some(edge), Some(labels)) => {
            let mut steps = Vec::with_capacity(k * k);
            for &i in nodes {
                for &j in nodes {
                    let path = enc.path(i, j);
                    steps.push(
                        path.iter()
                            .enumerate()
                            .map(|(hop, &e)| (hop as u32, labels[e as usize] as u32))
                            .collect(),
                    );
                }
            }
            let terms = PathTerms { n: k, steps };
            let edge_bias =
                tape.edge_path_bias(vars[edge.edge_types], vars[edge.hop_weights], &terms)?;
            tape.add_per_head(spatial, edge_bias)
        }
        _ => Ok(spatial),
    }
}

/// Multi-head attention with additive logit bias:
/// per head `softmax(q k^T / sqrt(d_head) + bias[head]) v`, heads
/// concatenated and projected.
pub fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    layer: &LayerParams,
    vars: &[Var],
    bias: Var,
) -> Result<Var, TensorError> {
    let scale = F::one() / F::from_usize(layer.d_head).sqrt();
    let mut head_outputs = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let q = tape.matmul(x, vars[layer.w_q[h]])?;
        let k = tape.matmul(x, vars[layer.w_k[h]])?;
        let v = tape.matmul(x, vars[layer.w_v[h]])?;
        let weights = tape.attn_weights(q, k, bias, h, scale)?;
        head_outputs.push(tape.matmul(weights, v)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    tape.matmul(concat, vars[layer.w_o])
}

/// Dropout context; a rate of zero is the identity and records nothing.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Prng,
}

fn apply_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    dropout: &mut Option<&mut Dropout<'_>>,
) -> Result<Var, TensorError> {
    let Some(ctx) = dropout.as_deref_mut() else {
        return Ok(x);
    };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.rate;
    let scale = F::from_f64(1.0 / keep);
    let mask: Vec<F> = (0..tape.data_of(x).len())
        .map(|_| {
            if rand::Rng::gen::<f64>(ctx.rng) < keep {
                scale
            } else {
                F::zero()
            }
        })
        .collect();
    tape.mul_mask(x, &mask)
}

/// Pre-norm residual transformer block.
pub fn transformer_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    layer: &LayerParams,
    vars: &[Var],
    bias: Var,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, TensorError> {
    let ln1 = tape.layer_norm(x, vars[layer.ln1_gain], vars[layer.ln1_bias])?;
    let att = attention(tape, ln1, layer, vars, bias)?;
    let att = apply_dropout(tape, att, &mut dropout)?;
    let h1 = tape.add(x, att)?;

    let ln2 = tape.layer_norm(h1, vars[layer.ln2_gain], vars[layer.ln2_bias])?;
    let mid = tape.matmul(ln2, vars[layer.w1])?;
    let mid = tape.add(mid, vars[layer.b1])?;
    let mid = tape.relu(mid);
    let out = tape.matmul(mid, vars[layer.w2])?;
    let out = tape.add(out, vars[layer.b2])?;
    let out = apply_dropout(tape, out, &mut dropout)?;
    tape.add(h1, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{compute_encodings, Graph};

    fn test_graph() -> (Graph, EncodedGraph) {
        let g = Graph {
            num_nodes: 5,
            edges: vec![(0, 1), (0, 3), (1, 2), (2, 3), (3, 4)],
            node_labels: Some(vec![0; 5]),
            node_attributes: None,
            edge_labels: Some(vec![0, 1, 2, 0, 1]),
            graph_target: None,
        };
        let enc = compute_encodings(&g, 8);
        (g, enc)
    }

    fn setup(
        seed: u64,
        d: usize,
        heads: usize,
        num_edge_classes: usize,
    ) -> (ParamStore<f64>, LayerParams, EncodingTables) {
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let layer = LayerParams::init(&mut store, &mut rng, "layer", d, heads, 4 * d);
        let tables = EncodingTables::init(
            &mut store,
            &mut rng,
            "tables",
            d,
            heads,
            16,
            8,
            num_edge_classes,
        );
        (store, layer, tables)
    }

    #[test]
    fn zero_tables_give_zero_bias() {
        let (g, enc) = test_graph();
        let (mut store, _, tables) = setup(1, 8, 2, 3);
        for idx in [
            tables.spatial,
            tables.edge.as_ref().unwrap().edge_types,
            tables.edge.as_ref().unwrap().hop_weights,
        ] {
            store.tensor_mut(idx).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let bias = build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
        assert!(tape.data_of(bias).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_subset_matches_full_bias() {
        let (g, enc) = test_graph();
        let (store, _, tables) = setup(2, 8, 2, 3);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let full = build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
        let subset = build_bias_subset(
            &mut tape,
            &enc,
            g.edge_labels.as_deref(),
            &tables,
            &vars,
            Some(&[0, 1, 2, 3, 4]),
        )
        .unwrap();
        assert_eq!(tape.data_of(full), tape.data_of(subset));
    }

    #[test]
    fn subset_bias_is_submatrix_of_full_bias() {
        let (g, enc) = test_graph();
        let (store, _, tables) = setup(3, 8, 2, 3);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let full = build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
        let subset = [1usize, 3, 4];
        let sub = build_bias_subset(
            &mut tape,
            &enc,
            g.edge_labels.as_deref(),
            &tables,
            &vars,
            Some(&subset),
        )
        .unwrap();
        let n = 5;
        let k = subset.len();
        let full_data = tape.data_of(full);
        let sub_data = tape.data_of(sub);
        for hd in 0..2 {
            for (a, &i) in subset.iter().enumerate() {
                for (b, &j) in subset.iter().enumerate() {
                    assert_eq!(
                        sub_data[(hd * k + a) * k + b],
                        full_data[(hd * n + i) * n + j],
                        "head {hd} ({a},{b})"
                    );
                }
            }
        }
    }

    #[test]
    fn bias_superposes_spatial_and_edge_terms() {
        let (g, enc) = test_graph();
        let (store, _, tables) = setup(4, 8, 2, 3);

        let compute_with = |zero_spatial: bool, zero_edge: bool| -> Vec<f64> {
            let mut store = store.clone();
            if zero_spatial {
                store.tensor_mut(tables.spatial).data_mut().fill(0.0);
            }
            if zero_edge {
                let e = tables.edge.as_ref().unwrap();
                store.tensor_mut(e.edge_types).data_mut().fill(0.0);
                store.tensor_mut(e.hop_weights).data_mut().fill(0.0);
            }
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let bias =
                build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
            tape.data_of(bias).to_vec()
        };

        let both = compute_with(false, false);
        let spatial_only = compute_with(false, true);
        let edge_only = compute_with(true, false);
        for ((b, s), e) in both.iter().zip(&spatial_only).zip(&edge_only) {
            assert!((b - (s + e)).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_term_matches_hand_walked_paths() {
        let (g, enc) = test_graph();
        let (store, _, tables) = setup(5, 8, 2, 3);
        let edge = tables.edge.as_ref().unwrap();
        let labels = g.edge_labels.as_ref().unwrap();

        // Zero the spatial table so the bias is the edge term alone.
        let edge_only = {
            let mut s2 = store.clone();
            s2.tensor_mut(tables.spatial).data_mut().fill(0.0);
            let mut tape = Tape::new();
            let vars = s2.bind(&mut tape);
            let bias =
                build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
            tape.data_of(bias).to_vec()
        };

        let edge_table = store.tensor(edge.edge_types);
        let hop_w = store.tensor(edge.hop_weights);
        let d = 8;
        let n = 5;
        for i in 0..n {
            for j in 0..n {
                let path = enc.path(i, j);
                let expected = if path.is_empty() {
                    0.0
                } else {
                    let mut sum = 0.0;
                    for (hop, &e) in path.iter().enumerate() {
                        let label = labels[e as usize];
                        let te = &edge_table.data()[label * d..(label + 1) * d];
                        let wh = &hop_w.data()[hop * d..(hop + 1) * d];
                        sum += te.iter().zip(wh).map(|(a, b)| a * b).sum::<f64>();
                    }
                    sum / path.len() as f64
                };
                for hd in 0..2 {
                    let got = edge_only[(hd * n + i) * n + j];
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "pair ({i},{j}) head {hd}: {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_node_attention_projects_single_value_row() {
        let (store, layer, _) = setup(6, 8, 2, 0);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x_t = Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let x = tape.constant(&x_t);
        let bias = tape.constant(&Tensor::zeros(vec![2, 1, 1]));
        let out = attention(&mut tape, x, &layer, &vars, bias).unwrap();

        // softmax over one logit = weight 1, so out = concat(v_h) W_O exactly.
        let mut expect_tape: Tape<f64> = Tape::new();
        let evars = store.bind(&mut expect_tape);
        let ex = expect_tape.constant(&x_t);
        let v0 = expect_tape.matmul(ex, evars[layer.w_v[0]]).unwrap();
        let v1 = expect_tape.matmul(ex, evars[layer.w_v[1]]).unwrap();
        let cat = expect_tape.concat_cols(&[v0, v1]).unwrap();
        let expected = expect_tape.matmul(cat, evars[layer.w_o]).unwrap();
        for (a, b) in tape.data_of(out).iter().zip(expect_tape.data_of(expected)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_bias_shift_leaves_output_unchanged() {
        let (g, enc) = test_graph();
        let (store, layer, tables) = setup(7, 8, 2, 3);
        let run = |shift: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let x = tape.constant(
                &Tensor::new(
                    vec![5, 8],
                    (0..40).map(|i| (i as f64 * 0.07).sin()).collect(),
                )
                .unwrap(),
            );
            let bias =
                build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
            let shifted = if shift == 0.0 {
                bias
            } else {
                let plane = tape.constant(&Tensor::new(vec![5, 5], vec![shift; 25]).unwrap());
                tape.add_per_head(bias, plane).unwrap()
            };
            let out = attention(&mut tape, x, &layer, &vars, shifted).unwrap();
            tape.data_of(out).to_vec()
        };
        let base = run(0.0);
        let shifted = run(3.5);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_make_identity_block() {
        let (g, enc) = test_graph();
        let (mut store, layer, tables) = setup(8, 8, 2, 3);
        store.tensor_mut(layer.w_o).data_mut().fill(0.0);
        store.tensor_mut(layer.w2).data_mut().fill(0.0);
        store.tensor_mut(layer.b2).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x_t = Tensor::new(
            vec![5, 8],
            (0..40).map(|i| (i as f64 * 0.13).cos()).collect(),
        )
        .unwrap();
        let x = tape.constant(&x_t);
        let bias = build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
        let out = transformer_layer(&mut tape, x, &layer, &vars, bias, None).unwrap();
        assert_eq!(tape.data_of(out), x_t.data());
    }

    #[test]
    fn permuting_rows_and_bias_permutes_output() {
        let (store, layer, _) = setup(9, 8, 2, 0);
        let n = 4;
        let x_data: Vec<f64> = (0..n * 8).map(|i| (i as f64 * 0.11).sin()).collect();
        let bias_data: Vec<f64> = (0..2 * n * n)
            .map(|i| (i as f64 * 0.21).cos() * 0.3)
            .collect();
        let perm = [2usize, 0, 3, 1];

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(&Tensor::new(vec![n, 8], x_data.clone()).unwrap());
        let bias = tape.constant(&Tensor::new(vec![2, n, n], bias_data.clone()).unwrap());
        let out = transformer_layer(&mut tape, x, &layer, &vars, bias, None).unwrap();
        let base = tape.data_of(out).to_vec();

        // Permuted run: x rows and bias rows/cols permuted consistently.
        let mut xp = vec![0.0; n * 8];
        for (new, &old) in perm.iter().enumerate() {
            xp[new * 8..(new + 1) * 8].copy_from_slice(&x_data[old * 8..(old + 1) * 8]);
        }
        let mut bp = vec![0.0; 2 * n * n];
        for hd in 0..2 {
            for (a, &i) in perm.iter().enumerate() {
                for (b, &j) in perm.iter().enumerate() {
                    bp[(hd * n + a) * n + b] = bias_data[(hd * n + i) * n + j];
                }
            }
        }
        let mut tape2 = Tape::new();
        let vars2 = store.bind(&mut tape2);
        let x2 = tape2.constant(&Tensor::new(vec![n, 8], xp).unwrap());
        let bias2 = tape2.constant(&Tensor::new(vec![2, n, n], bp).unwrap());
        let out2 = transformer_layer(&mut tape2, x2, &layer, &vars2, bias2, None).unwrap();
        let permuted = tape2.data_of(out2);

        for (new, &old) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (permuted[new * 8 + c] - base[old * 8 + c]).abs() < 1e-10,
                    "row {new} col {c}"
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let (g, enc) = test_graph();
        let (store, layer, tables) = setup(10, 8, 2, 3);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(
            &Tensor::new(
                vec![5, 8],
                (0..40).map(|i| (i as f64 * 0.19).sin()).collect(),
            )
            .unwrap(),
        );
        let bias = build_bias(&mut tape, &enc, g.edge_labels.as_deref(), &tables, &vars).unwrap();
        let scale = 1.0 / (layer.d_head as f64).sqrt();
        for h in 0..layer.heads {
            let q = tape.matmul(x, vars[layer.w_q[h]]).unwrap();
            let k = tape.matmul(x, vars[layer.w_k[h]]).unwrap();
            let w = tape.attn_weights(q, k, bias, h, scale).unwrap();
            for row in tape.data_of(w).chunks(5) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
