//! The gradient tape: forward ops record themselves in execution order and
//! `backward` replays the record in exact reverse.
//!
//! Conventions:
//! * every op validates shapes/indices up front and returns a typed error;
//! * data buffers stay live until the tape is dropped (backward needs them);
//! * gradient buffers of interior nodes are freed as soon as the reverse
//!   sweep has consumed them, while leaf gradients are kept for the caller;
//! * the live-float counter tracks the tape-resident buffers (data + grads)
//!   and records the peak, which is what the memory model measures.
//! * in attention weights and `softmax_lastdim`, `-inf` marks masked logits
//!   (padding); a row that is entirely masked yields all-zero weights.

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shortest-path contributions of one node pair for the edge encoding:
/// `(hop index, edge label)` per step along the stored path.
#[derive(Debug, Clone, Default)]
pub struct PathTerms {
    pub n: usize,
    /// Row-major `n * n` entries; empty along the diagonal and for
    /// unreachable pairs.
    pub steps: Vec<Vec<(u32, u32)>>,
}

#[derive(Debug)]
pub enum Op<F> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    /// `scale * a b^T` — rows of `b` are dotted against rows of `a`.
    MatmulNT {
        a: Var,
        b: Var,
        scale: F,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `a + bias` broadcast over the trailing dimension.
    AddTrailing {
        a: Var,
        bias: Var,
    },
    /// `a[h,n,n] + b[n,n]` broadcast over heads.
    AddPerHead {
        a: Var,
        b: Var,
    },
    AddN {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        c: F,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    EmbeddingLookup {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    /// Rebuilds full node order: visible rows from `rows`, every other row
    /// a copy of `fill`.
    ComposeRows {
        rows: Var,
        fill: Var,
        visible: Vec<usize>,
        n: usize,
    },
    MeanRows {
        x: Var,
    },
    PadRows {
        x: Var,
        n_total: usize,
    },
    /// Pads an `[h,n,n]` bias to `[h,N,N]`; padded entries are `-inf`.
    PadBias {
        x: Var,
        n_total: usize,
    },
    /// `out[h,a,b] = x[h, subset[a], subset[b]]`.
    Submatrix {
        x: Var,
        subset: Vec<usize>,
    },
    /// `out[h,i,j] = table[h, index[i*n+j]]`.
    GatherBias {
        table: Var,
        index: Vec<u32>,
        n: usize,
    },
    /// Path-averaged edge bias `out[i,j] = mean_t <edge_table[label_t], hop_w[hop_t]>`.
    EdgePathBias {
        edge_table: Var,
        hop_weights: Var,
        terms: PathTerms,
    },
    /// Softmax attention weights of one head:
    /// `softmax(scale * q k^T + bias[head])`.
    AttnWeights {
        q: Var,
        k: Var,
        bias: Var,
        head: usize,
        scale: F,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    /// Elementwise product with a constant mask (dropout).
    MulMask {
        x: Var,
        mask: Vec<F>,
    },
    SumAll {
        x: Var,
    },
    MseLoss {
        pred: Var,
        target: Vec<F>,
    },
    L1Loss {
        pred: Var,
        target: Vec<F>,
    },
    CrossEntropyLoss {
        logits: Var,
        labels: Vec<usize>,
    },
}

impl<F> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddTrailing { .. } => "add_trailing",
            Op::AddPerHead { .. } => "add_per_head",
            Op::AddN { .. } => "add_n",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::GatherRows { .. } => "gather_rows",
            Op::ComposeRows { .. } => "compose_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::PadRows { .. } => "pad_rows",
            Op::PadBias { .. } => "pad_bias",
            Op::Submatrix { .. } => "submatrix",
            Op::GatherBias { .. } => "gather_bias",
            Op::EdgePathBias { .. } => "edge_path_bias",
            Op::AttnWeights { .. } => "attn_weights",
            Op::ConcatCols { .. } => "concat_cols",
            Op::MulMask { .. } => "mul_mask",
            Op::SumAll { .. } => "sum_all",
            Op::MseLoss { .. } => "mse_loss",
            Op::L1Loss { .. } => "l1_loss",
            Op::CrossEntropyLoss { .. } => "cross_entropy_loss",
        }
    }
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    param: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    counting: bool,
    live_floats: u64,
    peak_floats: u64,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- 2-d kernels ---------------------------------------------------------

fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            counting: true,
            live_floats: 0,
            peak_floats: 0,
        }
    }

    /// A tape whose live-float counter never runs; reading the peak then
    /// fails with a state error.
    pub fn without_counter() -> Self {
        Tape {
            counting: false,
            ..Self::new()
        }
    }

    fn count_alloc(&mut self, len: usize) {
        if self.counting {
            self.live_floats += len as u64;
            self.peak_floats = self.peak_floats.max(self.live_floats);
        }
    }

    fn count_free(&mut self, len: usize) {
        if self.counting {
            self.live_floats -= len as u64;
        }
    }

    /// Peak simultaneously-live tape floats observed so far.
    pub fn peak_live_floats(&self) -> Result<u64, TensorError> {
        if !self.counting {
            return Err(TensorError::State("live-float counter is disabled".into()));
        }
        Ok(self.peak_floats)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(op name, shape)` of every node, for structural assertions in tests
    /// and the memory model.
    pub fn node_summaries(&self) -> Vec<(&'static str, &[usize])> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), n.shape.as_slice()))
            .collect()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, param: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.count_alloc(data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Its gradient survives `backward`.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a non-trainable leaf (inputs, constants).
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data_of(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient buffer of a node, if one was materialized by `backward`.
    pub fn grad_of(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn require_2d(&self, v: Var, what: &str) -> Result<(usize, usize), TensorError> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Shape(format!(
                "{what} must be 2-d, got shape {s:?}"
            ))),
        }
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.require_2d(a, "matmul lhs")?;
        let (k2, n) = self.require_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul inner dims disagree: lhs {:?} vs rhs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_kernel(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, false))
    }

    /// `scale * a b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: F) -> Result<Var, TensorError> {
        let (m, k) = self.require_2d(a, "matmul_nt lhs")?;
        let (n, k2) = self.require_2d(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul_nt trailing dims disagree: lhs {:?} vs rhs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let a_data = &self.nodes[a.0].data;
        let b_data = &self.nodes[b.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &a_data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = scale * dot(a_row, &b_data[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatmulNT { a, b, scale }, false))
    }

    /// Elementwise sum for equal shapes, or broadcast of a trailing bias
    /// vector (`b.numel() == a.shape.last()`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            let data: Vec<F> = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x + y)
                .collect();
            let shape = sa.clone();
            return Ok(self.push(shape, data, Op::Add { a, b }, false));
        }
        let last = *sa.last().unwrap_or(&0);
        if self.nodes[b.0].data.len() == last && last > 0 {
            let data: Vec<F> = self.nodes[a.0]
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + self.nodes[b.0].data[i % last])
                .collect();
            let shape = sa.clone();
            return Ok(self.push(shape, data, Op::AddTrailing { a, bias: b }, false));
        }
        Err(TensorError::Shape(format!(
            "add shapes {sa:?} and {sb:?} are incompatible"
        )))
    }

    /// `a[h,n,n] + b[n,n]`, broadcasting `b` over heads.
    pub fn add_per_head(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        let (nb, nb2) = self.require_2d(b, "add_per_head rhs")?;
        match sa[..] {
            [_, n1, n2] if n1 == nb && n2 == nb2 => {}
            _ => {
                return Err(TensorError::Shape(format!(
                    "add_per_head shapes {sa:?} and {:?} are incompatible",
                    self.nodes[b.0].shape
                )))
            }
        }
        let plane = nb * nb2;
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].data[i % plane])
            .collect();
        Ok(self.push(sa, data, Op::AddPerHead { a, b }, false))
    }

    /// Sum of any number of same-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Argument("add_n needs at least one input".into()))?;
        let shape = self.nodes[first.0].shape.clone();
        for &x in xs {
            if self.nodes[x.0].shape != shape {
                return Err(TensorError::Shape("add_n shapes differ".into()));
            }
        }
        let mut data = self.nodes[first.0].data.clone();
        for &x in &xs[1..] {
            for (o, &v) in data.iter_mut().zip(&self.nodes[x.0].data) {
                *o += v;
            }
        }
        Ok(self.push(shape, data, Op::AddN { xs: xs.to_vec() }, false))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data: Vec<F> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x, c }, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<F> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Relu { x }, false)
    }

    fn softmax_rows(input: &[F], cols: usize, out: &mut [F]) {
        for (row_in, row_out) in input.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row_in
                .iter()
                .copied()
                .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
            if max == F::neg_infinity() {
                row_out.fill(F::zero());
                continue;
            }
            let mut sum = F::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    /// `-inf` entries act as masked positions; a fully masked row comes out
    /// all-zero. `NaN` or `+inf` input is a numeric error.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::Shape("softmax on 0-d tensor".into()))?;
        if cols == 0 {
            return Err(TensorError::Shape("softmax over empty dimension".into()));
        }
        if self.nodes[x.0]
            .data
            .iter()
            .any(|v| v.is_nan() || *v == F::infinity())
        {
            return Err(TensorError::Numeric(
                "softmax input contains NaN or +inf".into(),
            ));
        }
        let mut out = vec![F::zero(); self.nodes[x.0].data.len()];
        Self::softmax_rows(&self.nodes[x.0].data, cols, &mut out);
        Ok(self.push(shape, out, Op::Softmax { x }, false))
    }

    const LAYER_NORM_EPS: f64 = 1e-5;

    /// Rowwise layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::Shape("layer_norm on 0-d tensor".into()))?;
        if self.nodes[gain.0].data.len() != d || self.nodes[bias.0].data.len() != d {
            return Err(TensorError::Shape(format!(
                "layer_norm gain/bias must have {d} elements"
            )));
        }
        let eps = F::from_f64(Self::LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_usize(d);
        let x_data = &self.nodes[x.0].data;
        let gain_data = &self.nodes[gain.0].data;
        let bias_data = &self.nodes[bias.0].data;
        let mut out = vec![F::zero(); x_data.len()];
        for (row, out_row) in x_data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv_std = F::one() / (var + eps).sqrt();
            for ((o, &v), (&g, &b)) in out_row
                .iter_mut()
                .zip(row)
                .zip(gain_data.iter().zip(bias_data))
            {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias }, false))
    }

    /// Rows of `table` selected by `ids`; gradients scatter back into the
    /// table rows.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.require_2d(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index(format!(
                "embedding id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, d) = self.require_2d(x, "gather_rows input")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index(format!(
                "row id {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.nodes[x.0].data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    /// Restores full node order: row `visible[t]` of the output is row `t`
    /// of `rows`, every other row is a copy of `fill`. The gradient of
    /// `fill` is the sum over all filled rows.
    pub fn compose_rows(
        &mut self,
        rows: Var,
        fill: Var,
        visible: &[usize],
        n: usize,
    ) -> Result<Var, TensorError> {
        let (m, d) = self.require_2d(rows, "compose_rows rows")?;
        if m != visible.len() {
            return Err(TensorError::Shape(format!(
                "compose_rows got {m} rows for {} visible positions",
                visible.len()
            )));
        }
        if self.nodes[fill.0].data.len() != d {
            return Err(TensorError::Shape(format!(
                "compose_rows fill must have {d} elements"
            )));
        }
        if visible.windows(2).any(|w| w[0] >= w[1]) || visible.iter().any(|&i| i >= n) {
            return Err(TensorError::Index(
                "visible indices must be sorted, unique, and < n".into(),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        let mut next = 0usize;
        for i in 0..n {
            if next < visible.len() && visible[next] == i {
                data.extend_from_slice(&self.nodes[rows.0].data[next * d..(next + 1) * d]);
                next += 1;
            } else {
                data.extend_from_slice(&self.nodes[fill.0].data);
            }
        }
        Ok(self.push(
            vec![n, d],
            data,
            Op::ComposeRows {
                rows,
                fill,
                visible: visible.to_vec(),
                n,
            },
            false,
        ))
    }

    /// Column means: `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, d) = self.require_2d(x, "mean_rows input")?;
        if n == 0 {
            return Err(TensorError::Shape("mean_rows over zero rows".into()));
        }
        let inv = F::one() / F::from_usize(n);
        let mut out = vec![F::zero(); d];
        for row in self.nodes[x.0].data.chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v * inv;
            }
        }
        Ok(self.push(vec![1, d], out, Op::MeanRows { x }, false))
    }

    /// Appends zero rows up to `n_total`.
    pub fn pad_rows(&mut self, x: Var, n_total: usize) -> Result<Var, TensorError> {
        let (n, d) = self.require_2d(x, "pad_rows input")?;
        if n_total < n {
            return Err(TensorError::Shape(format!(
                "pad_rows target {n_total} smaller than {n} rows"
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        data.resize(n_total * d, F::zero());
        Ok(self.push(vec![n_total, d], data, Op::PadRows { x, n_total }, false))
    }

    /// Pads `[h,n,n]` attention bias to `[h,N,N]`; entries to or from padded
    /// positions are the `-inf` mask sentinel.
    pub fn pad_bias(&mut self, x: Var, n_total: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let (h, n) = match shape[..] {
            [h, n1, n2] if n1 == n2 => (h, n1),
            ref s => {
                return Err(TensorError::Shape(format!(
                    "pad_bias wants [h,n,n], got {s:?}"
                )))
            }
        };
        if n_total < n {
            return Err(TensorError::Shape(format!(
                "pad_bias target {n_total} smaller than {n}"
            )));
        }
        let mut data = vec![F::neg_infinity(); h * n_total * n_total];
        for hd in 0..h {
            for i in 0..n {
                let src = &self.nodes[x.0].data[(hd * n + i) * n..(hd * n + i) * n + n];
                let dst_off = (hd * n_total + i) * n_total;
                data[dst_off..dst_off + n].copy_from_slice(src);
            }
        }
        Ok(self.push(
            vec![h, n_total, n_total],
            data,
            Op::PadBias { x, n_total },
            false,
        ))
    }

    /// Selects the `subset x subset` submatrix of each head:
    /// `out[h,a,b] = x[h, subset[a], subset[b]]`.
    pub fn submatrix(&mut self, x: Var, subset: &[usize]) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let (h, n) = match shape[..] {
            [h, n1, n2] if n1 == n2 => (h, n1),
            ref s => {
                return Err(TensorError::Shape(format!(
                    "submatrix wants [h,n,n], got {s:?}"
                )))
            }
        };
        if let Some(&bad) = subset.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index(format!(
                "subset index {bad} out of range for {n} nodes"
            )));
        }
        let k = subset.len();
        let mut data = Vec::with_capacity(h * k * k);
        for hd in 0..h {
            for &i in subset {
                for &j in subset {
                    data.push(self.nodes[x.0].data[(hd * n + i) * n + j]);
                }
            }
        }
        Ok(self.push(
            vec![h, k, k],
            data,
            Op::Submatrix {
                x,
                subset: subset.to_vec(),
            },
            false,
        ))
    }

    /// Per-head table lookup over an index matrix:
    /// `out[h,i,j] = table[h, index[i*n+j]]`.
    pub fn gather_bias(&mut self, table: Var, index: &[u32], n: usize) -> Result<Var, TensorError> {
        let (h, entries) = self.require_2d(table, "bias table")?;
        if index.len() != n * n {
            return Err(TensorError::Shape(format!(
                "index matrix has {} entries, expected {}",
                index.len(),
                n * n
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= entries) {
            return Err(TensorError::Index(format!(
                "bias index {bad} out of range for table with {entries} entries"
            )));
        }
        let mut data = Vec::with_capacity(h * n * n);
        for hd in 0..h {
            let row = &self.nodes[table.0].data[hd * entries..(hd + 1) * entries];
            data.extend(index.iter().map(|&i| row[i as usize]));
        }
        Ok(self.push(
            vec![h, n, n],
            data,
            Op::GatherBias {
                table,
                index: index.to_vec(),
                n,
            },
            false,
        ))
    }

    /// Path-averaged edge encoding. For each pair with stored path steps
    /// `(hop_t, label_t)`, the output is
    /// `(1/len) * sum_t <edge_table[label_t], hop_weights[hop_t]>`,
    /// and zero for empty paths.
    pub fn edge_path_bias(
        &mut self,
        edge_table: Var,
        hop_weights: Var,
        terms: &PathTerms,
    ) -> Result<Var, TensorError> {
        let (labels, d_e) = self.require_2d(edge_table, "edge table")?;
        let (hops, d_e2) = self.require_2d(hop_weights, "hop weights")?;
        if d_e != d_e2 {
            return Err(TensorError::Shape(format!(
                "edge table dim {d_e} != hop weight dim {d_e2}"
            )));
        }
        let n = terms.n;
        if terms.steps.len() != n * n {
            return Err(TensorError::Shape("path terms are not n*n".into()));
        }
        for steps in &terms.steps {
            if let Some(&(hop, label)) = steps
                .iter()
                .find(|&&(hop, label)| hop as usize >= hops || label as usize >= labels)
            {
                return Err(TensorError::Index(format!(
                    "path step (hop {hop}, label {label}) out of range"
                )));
            }
        }
        let table = &self.nodes[edge_table.0].data;
        let weights = &self.nodes[hop_weights.0].data;
        let mut data = vec![F::zero(); n * n];
        for (o, steps) in data.iter_mut().zip(&terms.steps) {
            if steps.is_empty() {
                continue;
            }
            let inv_len = F::one() / F::from_usize(steps.len());
            let mut acc = F::zero();
            for &(hop, label) in steps {
                acc += dot(
                    &table[label as usize * d_e..(label as usize + 1) * d_e],
                    &weights[hop as usize * d_e..(hop as usize + 1) * d_e],
                );
            }
            *o = acc * inv_len;
        }
        Ok(self.push(
            vec![n, n],
            data,
            Op::EdgePathBias {
                edge_table,
                hop_weights,
                terms: terms.clone(),
            },
            false,
        ))
    }

    /// One head's attention weights `softmax(scale * q k^T + bias[head])`,
    /// computed row by row. Only the weights are retained; logits are
    /// per-row scratch. The `-inf` masking convention of
    /// [`softmax_lastdim`](Self::softmax_lastdim) applies.
    pub fn attn_weights(
        &mut self,
        q: Var,
        k: Var,
        bias: Var,
        head: usize,
        scale: F,
    ) -> Result<Var, TensorError> {
        let (n, dh) = self.require_2d(q, "attention queries")?;
        let (nk, dh2) = self.require_2d(k, "attention keys")?;
        if n != nk || dh != dh2 {
            return Err(TensorError::Shape(format!(
                "attention q {:?} and k {:?} disagree",
                self.nodes[q.0].shape, self.nodes[k.0].shape
            )));
        }
        let bias_shape = self.nodes[bias.0].shape.clone();
        match bias_shape[..] {
            [h, b1, b2] if head < h && b1 == n && b2 == n => {}
            ref s => {
                return Err(TensorError::Shape(format!(
                    "attention bias {s:?} incompatible with head {head} over {n} rows"
                )))
            }
        }
        let q_data = &self.nodes[q.0].data;
        let k_data = &self.nodes[k.0].data;
        let bias_data = &self.nodes[bias.0].data;
        let bias_off = head * n * n;
        let mut weights = vec![F::zero(); n * n];
        let mut logits = vec![F::zero(); n];
        for i in 0..n {
            let q_row = &q_data[i * dh..(i + 1) * dh];
            let bias_row = &bias_data[bias_off + i * n..bias_off + (i + 1) * n];
            for (j, l) in logits.iter_mut().enumerate() {
                let b = bias_row[j];
                if b.is_nan() || b == F::infinity() {
                    return Err(TensorError::Numeric(
                        "attention bias contains NaN or +inf".into(),
                    ));
                }
                *l = scale * dot(q_row, &k_data[j * dh..(j + 1) * dh]) + b;
            }
            Self::softmax_rows(&logits, n, &mut weights[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            vec![n, n],
            weights,
            Op::AttnWeights {
                q,
                k,
                bias,
                head,
                scale,
            },
            false,
        ))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat_cols needs inputs".into()))?;
        let (n, _) = self.require_2d(first, "concat_cols input")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, d) = self.require_2d(p, "concat_cols input")?;
            if np != n {
                return Err(TensorError::Shape("concat_cols row counts differ".into()));
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &d) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(
            vec![n, total],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    /// Elementwise product with a constant mask; the dropout primitive.
    pub fn mul_mask(&mut self, x: Var, mask: &[F]) -> Result<Var, TensorError> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::Shape("mask length mismatch".into()));
        }
        let data: Vec<F> = self.nodes[x.0]
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            shape,
            data,
            Op::MulMask {
                x,
                mask: mask.to_vec(),
            },
            false,
        ))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.nodes[x.0].data.iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll { x }, false)
    }

    /// Mean squared error against a constant target, averaged over all
    /// elements.
    pub fn loss_mse(&mut self, pred: Var, target: &[F]) -> Result<Var, TensorError> {
        if target.len() != self.nodes[pred.0].data.len() {
            return Err(TensorError::Shape(format!(
                "mse target has {} elements, prediction {}",
                target.len(),
                self.nodes[pred.0].data.len()
            )));
        }
        let inv = F::one() / F::from_usize(target.len());
        let s: F = self.nodes[pred.0]
            .data
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            vec![1],
            vec![s * inv],
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
            false,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn loss_l1(&mut self, pred: Var, target: &[F]) -> Result<Var, TensorError> {
        if target.len() != self.nodes[pred.0].data.len() {
            return Err(TensorError::Shape(format!(
                "l1 target has {} elements, prediction {}",
                target.len(),
                self.nodes[pred.0].data.len()
            )));
        }
        let inv = F::one() / F::from_usize(target.len());
        let s: F = self.nodes[pred.0]
            .data
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        Ok(self.push(
            vec![1],
            vec![s * inv],
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
            false,
        ))
    }

    /// Mean over rows of `logsumexp(row) - row[label]`.
    pub fn loss_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let (m, c) = self.require_2d(logits, "cross-entropy logits")?;
        if labels.len() != m {
            return Err(TensorError::Shape(format!(
                "{} labels for {m} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let inv = F::one() / F::from_usize(m);
        let mut total = F::zero();
        for (row, &label) in self.nodes[logits.0].data.chunks(c).zip(labels) {
            let max = row
                .iter()
                .copied()
                .fold(F::neg_infinity(), |a, v| if v > a { v } else { a });
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += lse - row[label];
        }
        Ok(self.push(
            vec![1],
            vec![total * inv],
            Op::CrossEntropyLoss {
                logits,
                labels: labels.to_vec(),
            },
            false,
        ))
    }

    // ---- backward ----------------------------------------------------------

    fn add_grad(&mut self, v: Var, contrib: &[F]) {
        self.ensure_grad(v);
        for (g, &c) in self.nodes[v.0]
            .grad
            .as_mut()
            .unwrap()
            .iter_mut()
            .zip(contrib)
        {
            *g += c;
        }
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let len = self.nodes[v.0].data.len();
            self.count_alloc(len);
            self.nodes[v.0].grad = Some(vec![F::zero(); len]);
        }
    }

    /// Reverse sweep from a scalar root. Gradients of `param` leaves are
    /// materialized (zero if unreachable) and survive; interior gradients
    /// are freed as soon as they have been propagated.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.ensure_grad(root);
        self.nodes[root.0].grad.as_mut().unwrap()[0] = F::one();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let param = self.nodes[i].param;
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            if param {
                self.nodes[i].grad = Some(g);
            } else {
                self.count_free(g.len());
            }
        }

        // Unreachable parameters still get a zero gradient.
        for i in 0..self.nodes.len() {
            if self.nodes[i].param {
                self.ensure_grad(Var(i));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, out: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // da = g b^T
                let mut da = vec![F::zero(); m * k];
                {
                    let b_data = &self.nodes[b.0].data;
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(g_row, &b_data[p * n..(p + 1) * n]);
                        }
                    }
                }
                // db = a^T g
                let mut db = vec![F::zero(); k * n];
                {
                    let a_data = &self.nodes[a.0].data;
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let a_row = &a_data[i * k..(i + 1) * k];
                        for (p, &av) in a_row.iter().enumerate() {
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for (o, &gv) in db_row.iter_mut().zip(g_row) {
                                *o += av * gv;
                            }
                        }
                    }
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }

            Op::MatmulNT { a, b, scale } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                // da = scale * g b ; db = scale * g^T a
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); n * k];
                {
                    let b_data = &self.nodes[b.0].data;
                    let a_data = &self.nodes[a.0].data;
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let a_row = &a_data[i * k..(i + 1) * k];
                        let da_row = &mut da[i * k..(i + 1) * k];
                        for (j, &gv) in g_row.iter().enumerate() {
                            let sv = *scale * gv;
                            let b_row = &b_data[j * k..(j + 1) * k];
                            for (o, &bv) in da_row.iter_mut().zip(b_row) {
                                *o += sv * bv;
                            }
                            let db_row = &mut db[j * k..(j + 1) * k];
                            for (o, &av) in db_row.iter_mut().zip(a_row) {
                                *o += sv * av;
                            }
                        }
                    }
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }

            Op::Add { a, b } => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }

            Op::AddTrailing { a, bias } => {
                self.add_grad(*a, g);
                let d = self.nodes[bias.0].data.len();
                let mut db = vec![F::zero(); d];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % d] += gv;
                }
                self.add_grad(*bias, &db);
            }

            Op::AddPerHead { a, b } => {
                self.add_grad(*a, g);
                let plane = self.nodes[b.0].data.len();
                let mut db = vec![F::zero(); plane];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % plane] += gv;
                }
                self.add_grad(*b, &db);
            }

            Op::AddN { xs } => {
                for &x in xs {
                    self.add_grad(x, g);
                }
            }

            Op::Scale { x, c } => {
                let dx: Vec<F> = g.iter().map(|&gv| gv * *c).collect();
                self.add_grad(*x, &dx);
            }

            Op::Relu { x } => {
                let dx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                self.add_grad(*x, &dx);
            }

            Op::Softmax { x } => {
                // Jacobian product against the retained output s:
                // dx = s * (g - <g, s>) per row.
                let cols = *self.nodes[x.0].shape.last().unwrap();
                let s = &self.nodes[out].data;
                let mut dx = vec![F::zero(); s.len()];
                for ((s_row, g_row), dx_row) in
                    s.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                {
                    let inner = dot(s_row, g_row);
                    for ((o, &sv), &gv) in dx_row.iter_mut().zip(s_row).zip(g_row) {
                        *o = sv * (gv - inner);
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::LayerNorm { x, gain, bias } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let eps = F::from_f64(Self::LAYER_NORM_EPS);
                let inv_d = F::one() / F::from_usize(d);
                let rows = self.nodes[x.0].data.len() / d;
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..rows {
                    let x_row = &self.nodes[x.0].data[r * d..(r + 1) * d];
                    let g_row = &g[r * d..(r + 1) * d];
                    let mean = x_row.iter().copied().sum::<F>() * inv_d;
                    let var = x_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                    let inv_std = F::one() / (var + eps).sqrt();
                    for (o, &v) in xhat.iter_mut().zip(x_row) {
                        *o = (v - mean) * inv_std;
                    }
                    for j in 0..d {
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                        dxhat[j] = g_row[j] * self.nodes[gain.0].data[j];
                    }
                    let sum_dxhat = dxhat.iter().copied().sum::<F>();
                    let sum_dxhat_xhat = dot(&dxhat, &xhat);
                    let dx_row = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dx_row[j] = inv_std
                            * inv_d
                            * (F::from_usize(d) * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*gain, &dgain);
                self.add_grad(*bias, &dbias);
            }

            Op::EmbeddingLookup { table, ids } | Op::GatherRows { x: table, ids } => {
                let d = self.nodes[table.0].shape[1];
                self.ensure_grad(*table);
                let tg = self.nodes[table.0].grad.as_mut().unwrap();
                for (t, &i) in ids.iter().enumerate() {
                    for (o, &gv) in tg[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[t * d..(t + 1) * d])
                    {
                        *o += gv;
                    }
                }
            }

            Op::ComposeRows {
                rows,
                fill,
                visible,
                n,
            } => {
                let d = self.nodes[rows.0].shape[1];
                let mut drows = vec![F::zero(); visible.len() * d];
                let mut dfill = vec![F::zero(); d];
                let mut next = 0usize;
                for i in 0..*n {
                    let g_row = &g[i * d..(i + 1) * d];
                    if next < visible.len() && visible[next] == i {
                        drows[next * d..(next + 1) * d].copy_from_slice(g_row);
                        next += 1;
                    } else {
                        for (o, &gv) in dfill.iter_mut().zip(g_row) {
                            *o += gv;
                        }
                    }
                }
                self.add_grad(*rows, &drows);
                self.add_grad(*fill, &dfill);
            }

            Op::MeanRows { x } => {
                let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let inv = F::one() / F::from_usize(n);
                let mut dx = vec![F::zero(); n * d];
                for row in dx.chunks_mut(d) {
                    for (o, &gv) in row.iter_mut().zip(g) {
                        *o = gv * inv;
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::PadRows { x, .. } => {
                let len = self.nodes[x.0].data.len();
                self.add_grad(*x, &g[..len]);
            }

            Op::PadBias { x, n_total } => {
                let (h, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![F::zero(); h * n * n];
                for hd in 0..h {
                    for i in 0..n {
                        let src =
                            &g[(hd * n_total + i) * n_total..(hd * n_total + i) * n_total + n];
                        dx[(hd * n + i) * n..(hd * n + i) * n + n].copy_from_slice(src);
                    }
                }
                self.add_grad(*x, &dx);
            }

            Op::Submatrix { x, subset } => {
                let (h, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let k = subset.len();
                self.ensure_grad(*x);
                let xg = self.nodes[x.0].grad.as_mut().unwrap();
                for hd in 0..h {
                    for (a, &i) in subset.iter().enumerate() {
                        for (b, &j) in subset.iter().enumerate() {
                            xg[(hd * n + i) * n + j] += g[(hd * k + a) * k + b];
                        }
                    }
                }
            }

            Op::GatherBias { table, index, n } => {
                let entries = self.nodes[table.0].shape[1];
                let h = self.nodes[table.0].shape[0];
                self.ensure_grad(*table);
                let tg = self.nodes[table.0].grad.as_mut().unwrap();
                for hd in 0..h {
                    let plane = &g[hd * n * n..(hd + 1) * n * n];
                    let row = &mut tg[hd * entries..(hd + 1) * entries];
                    for (&idx, &gv) in index.iter().zip(plane) {
                        row[idx as usize] += gv;
                    }
                }
            }

            Op::EdgePathBias {
                edge_table,
                hop_weights,
                terms,
            } => {
                let d_e = self.nodes[edge_table.0].shape[1];
                let mut dtable = vec![F::zero(); self.nodes[edge_table.0].data.len()];
                let mut dhop = vec![F::zero(); self.nodes[hop_weights.0].data.len()];
                {
                    let table = &self.nodes[edge_table.0].data;
                    let weights = &self.nodes[hop_weights.0].data;
                    for (&gv, steps) in g.iter().zip(&terms.steps) {
                        if steps.is_empty() || gv == F::zero() {
                            continue;
                        }
                        let coef = gv / F::from_usize(steps.len());
                        for &(hop, label) in steps {
                            let (hop, label) = (hop as usize, label as usize);
                            let w_row = &weights[hop * d_e..(hop + 1) * d_e];
                            let t_row = &table[label * d_e..(label + 1) * d_e];
                            for (o, &wv) in
                                dtable[label * d_e..(label + 1) * d_e].iter_mut().zip(w_row)
                            {
                                *o += coef * wv;
                            }
                            for (o, &tv) in dhop[hop * d_e..(hop + 1) * d_e].iter_mut().zip(t_row) {
                                *o += coef * tv;
                            }
                        }
                    }
                }
                self.add_grad(*edge_table, &dtable);
                self.add_grad(*hop_weights, &dhop);
            }

            Op::AttnWeights {
                q,
                k,
                bias,
                head,
                scale,
            } => {
                // The weights s are the retained output; per row
                // dlogit = s * (g - <g, s>), then dq/dk/dbias follow from
                // logit[i,j] = scale <q_i, k_j> + bias[head,i,j].
                let (n, dh) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
                let mut dq = vec![F::zero(); n * dh];
                let mut dk = vec![F::zero(); n * dh];
                let mut dbias_head = vec![F::zero(); n * n];
                {
                    let q_data = &self.nodes[q.0].data;
                    let k_data = &self.nodes[k.0].data;
                    let weights = &self.nodes[out].data;
                    for i in 0..n {
                        let q_row = &q_data[i * dh..(i + 1) * dh];
                        let s_row = &weights[i * n..(i + 1) * n];
                        let g_row = &g[i * n..(i + 1) * n];
                        let inner = dot(s_row, g_row);
                        let dq_row = &mut dq[i * dh..(i + 1) * dh];
                        for j in 0..n {
                            let dlogit = s_row[j] * (g_row[j] - inner);
                            if dlogit == F::zero() {
                                continue;
                            }
                            dbias_head[i * n + j] = dlogit;
                            let s_dl = *scale * dlogit;
                            let k_row = &k_data[j * dh..(j + 1) * dh];
                            for (o, &kv) in dq_row.iter_mut().zip(k_row) {
                                *o += s_dl * kv;
                            }
                            let dk_row = &mut dk[j * dh..(j + 1) * dh];
                            for (o, &qv) in dk_row.iter_mut().zip(q_row) {
                                *o += s_dl * qv;
                            }
                        }
                    }
                }
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.ensure_grad(*bias);
                let bg = self.nodes[bias.0].grad.as_mut().unwrap();
                let bias_off = head * n * n;
                for (o, &gv) in bg[bias_off..bias_off + n * n].iter_mut().zip(&dbias_head) {
                    *o += gv;
                }
            }

            Op::ConcatCols { parts } => {
                let n = self.nodes[parts[0].0].shape[0];
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].shape[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &d) in parts.iter().zip(&widths) {
                    let mut dp = vec![F::zero(); n * d];
                    for i in 0..n {
                        dp[i * d..(i + 1) * d]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + d]);
                    }
                    self.add_grad(p, &dp);
                    offset += d;
                }
            }

            Op::MulMask { x, mask } => {
                let dx: Vec<F> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.add_grad(*x, &dx);
            }

            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.add_grad(*x, &dx);
            }

            Op::MseLoss { pred, target } => {
                let inv = F::one() / F::from_usize(target.len());
                let two = F::from_f64(2.0);
                let dp: Vec<F> = self.nodes[pred.0]
                    .data
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| two * (p - t) * inv * g[0])
                    .collect();
                self.add_grad(*pred, &dp);
            }

            Op::L1Loss { pred, target } => {
                let inv = F::one() / F::from_usize(target.len());
                let dp: Vec<F> = self.nodes[pred.0]
                    .data
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let diff = p - t;
                        let sign = if diff > F::zero() {
                            F::one()
                        } else if diff < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        sign * inv * g[0]
                    })
                    .collect();
                self.add_grad(*pred, &dp);
            }

            Op::CrossEntropyLoss { logits, labels } => {
                let c = self.nodes[logits.0].shape[1];
                let m = labels.len();
                let inv = F::one() / F::from_usize(m);
                let mut dl = vec![F::zero(); m * c];
                for ((row, &label), d_row) in self.nodes[logits.0]
                    .data
                    .chunks(c)
                    .zip(labels)
                    .zip(dl.chunks_mut(c))
                {
                    let max =
                        row.iter()
                            .copied()
                            .fold(F::neg_infinity(), |a, v| if v > a { v } else { a });
                    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
                    for (j, (o, &v)) in d_row.iter_mut().zip(row).enumerate() {
                        let softmax = (v - max).exp() / sum;
                        let indicator = if j == label { F::one() } else { F::zero() };
                        *o = (softmax - indicator) * inv * g[0];
                    }
                }
                self.add_grad(*logits, &dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_one_by_one() {
        let mut tape = T64::new();
        let a = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data_of(out), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(&t(vec![1, 1], vec![2.0]));
        let y = tape.constant(&t(vec![1, 1], vec![3.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.data_of(z), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = T64::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut tape = T64::new();
        let x = tape.constant(&t(vec![1, 2], vec![0.0, 0.0]));
        let s = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.data_of(s), &[0.5, 0.5]);

        let a = tape.constant(&t(vec![1, 3], vec![0.3, -1.0, 2.0]));
        let b = tape.constant(&t(vec![1, 3], vec![0.3 + 7.5, -1.0 + 7.5, 2.0 + 7.5]));
        let sa = tape.softmax_lastdim(a).unwrap();
        let sb = tape.softmax_lastdim(b).unwrap();
        for (x, y) in tape.data_of(sa).iter().zip(tape.data_of(sb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan_and_positive_infinity_but_masks_neg_infinity() {
        let mut tape = T64::new();
        let nan = tape.constant(&t(vec![1, 2], vec![f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax_lastdim(nan),
            Err(TensorError::Numeric(_))
        ));
        let pinf = tape.constant(&t(vec![1, 2], vec![f64::INFINITY, 0.0]));
        assert!(tape.softmax_lastdim(pinf).is_err());
        let masked = tape.constant(&t(vec![1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]));
        let s = tape.softmax_lastdim(masked).unwrap();
        assert_eq!(tape.data_of(s), &[0.5, 0.0, 0.5]);
        let all_masked = tape.constant(&t(vec![1, 2], vec![f64::NEG_INFINITY; 2]));
        let s = tape.softmax_lastdim(all_masked).unwrap();
        assert_eq!(tape.data_of(s), &[0.0, 0.0]);
    }

    #[test]
    fn relu_forward() {
        let mut tape = T64::new();
        let x = tape.constant(&t(vec![1, 3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data_of(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut tape = T64::new();
        let x = tape.constant(&t(vec![1, 4], vec![3.0; 4]));
        let gain = tape.constant(&t(vec![4], vec![1.0; 4]));
        let bias = tape.constant(&t(vec![4], vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for v in tape.data_of(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_reuse_accumulation() {
        // y = 3x
        let mut tape = T64::new();
        let x = tape.param(&t(vec![1], vec![5.0]));
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[3.0]);

        // y = x + x => dy/dx = 2
        let mut tape = T64::new();
        let x = tape.param(&t(vec![1], vec![5.0]));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = T64::new();
        let x = tape.param(&t(vec![1, 2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Argument(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = T64::new();
        let used = tape.param(&t(vec![1], vec![1.0]));
        let unused = tape.param(&t(vec![1, 2], vec![1.0, 2.0]));
        let y = tape.scale(used, 2.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut tape = T64::new();
        let logits = tape.constant(&t(vec![1, 2], vec![0.0, 0.0]));
        let loss = tape.loss_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = T64::new();
        let logits = tape.constant(&t(vec![1, 2], vec![0.0, 0.0]));
        assert!(matches!(
            tape.loss_cross_entropy(logits, &[2]),
            Err(TensorError::Index(_))
        ));
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut tape = T64::new();
        let x = tape.constant(&t(vec![1, 3], vec![1.0, -2.0, 0.5]));
        let loss = tape.loss_mse(x, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn compose_rows_places_visible_and_fill() {
        let mut tape = T64::new();
        let rows = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let fill = tape.constant(&t(vec![1, 2], vec![9.0, 9.0]));
        let out = tape.compose_rows(rows, fill, &[0, 2], 3).unwrap();
        assert_eq!(tape.data_of(out), &[1.0, 2.0, 9.0, 9.0, 3.0, 4.0]);
    }

    #[test]
    fn compose_rows_rejects_row_count_mismatch() {
        let mut tape = T64::new();
        let rows = tape.constant(&t(vec![1, 2], vec![1.0, 2.0]));
        let fill = tape.constant(&t(vec![1, 2], vec![0.0, 0.0]));
        assert!(matches!(
            tape.compose_rows(rows, fill, &[0, 2], 3),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn compose_rows_fill_gradient_sums_over_masked_rows() {
        let mut tape = T64::new();
        let rows = tape.param(&t(vec![1, 2], vec![1.0, 2.0]));
        let fill = tape.param(&t(vec![1, 2], vec![0.0, 0.0]));
        let out = tape.compose_rows(rows, fill, &[1], 4).unwrap();
        // Weighted sum with distinct weights per row.
        let w = vec![1.0, 10.0, 100.0, 1000.0, 2.0, 20.0, 200.0, 2000.0];
        let weighted = tape.mul_mask(out, &w).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        // fill receives weight rows 0, 2, 3; visible row 1 goes to `rows`
        assert_eq!(
            tape.grad_of(fill).unwrap(),
            &[1.0 + 2.0 + 200.0, 10.0 + 20.0 + 2000.0]
        );
        assert_eq!(tape.grad_of(rows).unwrap(), &[100.0, 1000.0]);
    }

    #[test]
    fn pad_bias_fills_neg_infinity() {
        let mut tape = T64::new();
        let bias = tape.constant(&t(vec![1, 1, 1], vec![0.25]));
        let padded = tape.pad_bias(bias, 2).unwrap();
        let d = tape.data_of(padded);
        assert_eq!(d[0], 0.25);
        assert!(d[1..].iter().all(|&v| v == f64::NEG_INFINITY));
    }

    #[test]
    fn peak_counter_counts_and_can_be_disabled() {
        let mut tape = T64::new();
        let x = tape.param(&t(vec![2, 2], vec![1.0; 4]));
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        // data: 4 + 4 + 1; grads at peak: root 1 + relu 4 + param 4
        assert!(tape.peak_live_floats().unwrap() >= 13);

        let tape: Tape<f64> = Tape::without_counter();
        assert!(matches!(
            tape.peak_live_floats(),
            Err(TensorError::State(_))
        ));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut tape = T64::new();
            let x = tape.param(&t(vec![2, 3], vec![0.3, -0.4, 1.7, 0.2, 0.9, -1.1]));
            let w = tape.param(&t(vec![3, 2], vec![0.5, -0.25, 0.75, 0.1, -0.6, 0.2]));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_lastdim(y).unwrap();
            let loss = tape.sum_all(s);
            tape.backward(loss).unwrap();
            (
                tape.grad_of(x).unwrap().to_vec(),
                tape.grad_of(w).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
