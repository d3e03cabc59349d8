//! Structural precomputation feeding the positional encodings: node degrees,
//! all-pairs shortest-path distances (BFS from every node), and one stored
//! shortest path per ordered reachable pair.

use super::Graph;

/// Sentinel distance for disconnected pairs. Distinct from every clamped
/// distance, and mapped to its own learnable entry in the spatial bias table.
pub const UNREACHABLE: u32 = u32::MAX;

/// Precomputed structure of one graph.
///
/// `spd[i][j]` is the hop count from `i` to `j`, clamped to `max_spd`, or
/// [`UNREACHABLE`]. `paths[i][j]` holds the edge indices of one shortest
/// path from `i` to `j`, truncated to the clamped length so that
/// `paths[i][j].len() == spd[i][j]` for every reachable pair; ties are
/// broken by lowest-neighbor-index-first BFS, so the stored paths (and
/// hence the edge encodings) are deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedGraph {
    pub num_nodes: usize,
    pub max_spd: u32,
    pub degrees: Vec<usize>,
    spd: Vec<u32>,
    paths: Vec<Vec<u32>>,
}

impl EncodedGraph {
    pub fn spd(&self, i: usize, j: usize) -> u32 {
        self.spd[i * self.num_nodes + j]
    }

    /// Edge indices of the stored shortest path from `i` to `j`; empty when
    /// `i == j` or the pair is unreachable.
    pub fn path(&self, i: usize, j: usize) -> &[u32] {
        &self.paths[i * self.num_nodes + j]
    }
}

/// BFS from every node, recording distances and parent edges; distances are
/// clamped to `max_spd` and stored paths are truncated to match.
pub fn compute_encodings(g: &Graph, max_spd: u32) -> EncodedGraph {
    debug_assert!(max_spd >= 1);
    let n = g.num_nodes;

    // Adjacency sorted by neighbor id, with the incident edge index.
    let mut adj: Vec<Vec<(usize, u32)>> = vec![Vec::new(); n];
    for (e, &(u, v)) in g.edges.iter().enumerate() {
        adj[u].push((v, e as u32));
        adj[v].push((u, e as u32));
    }
    for nbrs in &mut adj {
        nbrs.sort_unstable();
    }

    let mut spd = vec![UNREACHABLE; n * n];
    let mut paths = vec![Vec::new(); n * n];

    let mut dist = vec![UNREACHABLE; n];
    let mut parent: Vec<Option<(usize, u32)>> = vec![None; n];
    let mut queue = std::collections::VecDeque::new();

    for src in 0..n {
        dist.fill(UNREACHABLE);
        parent.fill(None);
        queue.clear();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &(v, e) in &adj[u] {
                if dist[v] == UNREACHABLE {
                    dist[v] = dist[u] + 1;
                    parent[v] = Some((u, e));
                    queue.push_back(v);
                }
            }
        }
        for dst in 0..n {
            if dist[dst] == UNREACHABLE {
                continue;
            }
            let clamped = dist[dst].min(max_spd);
            spd[src * n + dst] = clamped;
            if dst != src {
                let mut rev = Vec::with_capacity(dist[dst] as usize);
                let mut cur = dst;
                while cur != src {
                    let (prev, e) = parent[cur].unwrap();
                    rev.push(e);
                    cur = prev;
                }
                rev.reverse();
                rev.truncate(clamped as usize);
                paths[src * n + dst] = rev;
            }
        }
    }

    EncodedGraph {
        num_nodes: n,
        max_spd,
        degrees: g.degrees(),
        spd,
        paths,
    }
}
