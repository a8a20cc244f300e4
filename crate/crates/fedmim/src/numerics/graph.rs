//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends one node; values are computed eagerly at
//! construction time, so the tape doubles as the activation cache. `backward`
//! walks the tape once in reverse. The op set is exactly what the transformer
//! models and losses in this crate need — nothing speculative.

use crate::error::{ensure, Result};
use crate::numerics::tensor::Real;

/// Handle to a node on the tape. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    RepeatRow(NodeId, usize),
    AddRow(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu(NodeId),
    Square(NodeId),
    Ln(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<F: Real> {
    data: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Clone, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

const LAYER_NORM_EPS: f64 = 1e-6;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> Result<F> {
        let n = &self.nodes[id.0];
        ensure!(
            n.data.len() == 1,
            "expected a scalar node, got shape {:?}",
            n.shape
        );
        Ok(n.data[0])
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, op });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        ensure!(s.len() == 2, "{what} must be 2-d, got shape {s:?}");
        Ok((s[0], s[1]))
    }

    /// Input node. `param` links it to a parameter slot for gradient readout.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<F>, param: Option<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        ensure!(
            shape.iter().all(|&e| e > 0),
            "leaf extents must be positive, got {shape:?}"
        );
        ensure!(
            data.len() == numel,
            "leaf data length {} does not match shape {shape:?}",
            data.len()
        );
        Ok(self.push(shape, data, Op::Leaf { param }))
    }

    /// Input node that is not a parameter.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId> {
        self.leaf(shape, data, None)
    }

    pub fn scalar(&mut self, value: F) -> NodeId {
        self.push(vec![1], vec![value], Op::Leaf { param: None })
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        ensure!(
            self.nodes[a.0].shape == self.nodes[b.0].shape,
            "{name} operands must share a shape, got {:?} and {:?}",
            self.nodes[a.0].shape,
            self.nodes[b.0].shape
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        ensure!(ka == kb, "matmul inner extents differ: {ka} vs {kb}");
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "transpose input")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], data, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        ensure!(
            shape.iter().all(|&e| e > 0),
            "reshape extents must be positive, got {shape:?}"
        );
        ensure!(
            numel == self.nodes[a.0].data.len(),
            "reshape to {shape:?} changes element count from {}",
            self.nodes[a.0].data.len()
        );
        Ok(self.push(shape, self.nodes[a.0].data.clone(), Op::Reshape(a)))
    }

    /// Select rows of a 2-d node, in the given order (duplicates allowed).
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "gather input")?;
        ensure!(!rows.is_empty(), "gather needs at least one row");
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            ensure!(r < m, "gather row {r} out of range for {m} rows");
            data.extend_from_slice(&self.nodes[a.0].data[r * d..(r + 1) * d]);
        }
        Ok(self.push(vec![rows.len(), d], data, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        ensure!(!parts.is_empty(), "concat needs at least one part");
        let (_, d) = self.dims2(parts[0], "concat part")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, dp) = self.dims2(p, "concat part")?;
            ensure!(dp == d, "concat parts must share a width: {dp} vs {d}");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(vec![rows, d], data, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a 2-d node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "slice input")?;
        ensure!(
            start < end && end <= d,
            "column range {start}..{end} invalid for width {d}"
        );
        let w = end - start;
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * d + start..i * d + end]);
        }
        Ok(self.push(vec![m, w], data, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        ensure!(!parts.is_empty(), "concat needs at least one part");
        let (m, _) = self.dims2(parts[0], "concat part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, w) = self.dims2(p, "concat part")?;
            ensure!(mp == m, "concat parts must share a height: {mp} vs {m}");
            widths.push(w);
            total += w;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], data, Op::ConcatCols(parts.to_vec())))
    }

    /// Tile a `[1, d]` row into `[n, d]`.
    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "repeat input")?;
        ensure!(m == 1, "repeat input must be a single row, got {m} rows");
        ensure!(n > 0, "repeat count must be positive");
        let row = self.nodes[a.0].data.clone();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        Ok(self.push(vec![n, d], data, Op::RepeatRow(a, n)))
    }

    /// Add a `[1, d]` row to every row of a `[m, d]` node.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "broadcast-add input")?;
        let (rm, rd) = self.dims2(row, "broadcast-add row")?;
        ensure!(
            rm == 1 && rd == d,
            "broadcast row must be [1, {d}], got [{rm}, {rd}]"
        );
        let rdata = &self.nodes[row.0].data;
        let data = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rdata[i % d])
            .collect();
        Ok(self.push(vec![m, d], data, Op::AddRow(a, row)))
    }

    /// Row-wise softmax of a 2-d node.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "softmax input")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![F::zero(); m * d];
        for i in 0..m {
            softmax_row(&src[i * d..(i + 1) * d], &mut data[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![m, d], data, Op::Softmax(a)))
    }

    /// Row-wise layer normalisation with learned gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(x, "layer-norm input")?;
        for (id, what) in [(gamma, "gain"), (beta, "shift")] {
            let (rm, rd) = self.dims2(id, "layer-norm parameter")?;
            ensure!(
                rm == 1 && rd == d,
                "layer-norm {what} must be [1, {d}], got [{rm}, {rd}]"
            );
        }
        let eps = F::from_f64(LAYER_NORM_EPS);
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![F::zero(); m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let (mean, var) = row_mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(vec![m, d], data, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_value(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * x).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Square(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Ln(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = F::from_f64(self.nodes[a.0].data.len() as f64);
        let sum = sum_in_order(&self.nodes[a.0].data);
        self.push(vec![1], vec![sum / n], Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let sum = sum_in_order(&self.nodes[a.0].data);
        self.push(vec![1], vec![sum], Op::SumAll(a))
    }

    /// Column means of a 2-d node: `[m, d]` &rarr; `[1, d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "mean input")?;
        let src = &self.nodes[a.0].data;
        let inv = F::from_f64(m as f64).recip();
        let mut data = vec![F::zero(); d];
        for i in 0..m {
            for j in 0..d {
                data[j] = data[j] + src[i * d + j];
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(vec![1, d], data, Op::MeanRows(a)))
    }

    /// Mean over rows of the softmax cross-entropy between each logit row and
    /// its integer target. Fused for numerical stability.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, c) = self.dims2(logits, "cross-entropy logits")?;
        ensure!(
            targets.len() == m,
            "expected {m} targets, got {}",
            targets.len()
        );
        let src = &self.nodes[logits.0].data;
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            ensure!(t < c, "target class {t} out of range for {c} classes");
            let row = &src[i * c..(i + 1) * c];
            total = total + (log_sum_exp(row) - row[t]);
        }
        let loss = total / F::from_f64(m as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node. Returns one gradient buffer per node
    /// (`None` where nothing flowed).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Vec<F>>>> {
        ensure!(
            self.nodes[loss.0].data.len() == 1,
            "backward requires a scalar loss node, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(grads)
    }

    /// Gradients of parameter leaves, keyed by their parameter slot.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a [Option<Vec<F>>],
    ) -> impl Iterator<Item = (usize, &'a [F])> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(i, node)| match node.op {
                Op::Leaf { param: Some(p) } => grads
                    .get(i)
                    .and_then(|g| g.as_ref())
                    .map(|g| (p, g.as_slice())),
                _ => None,
            })
    }

    fn propagate(&self, idx: usize, gout: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Vec<F>>], id: NodeId, delta: Vec<F>| {
            match &mut grads[id.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&delta) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gout.to_vec());
                accumulate(grads, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gout.to_vec());
                accumulate(grads, *b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let bv = &self.nodes[b.0].data;
                let av = &self.nodes[a.0].data;
                accumulate(grads, *a, gout.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                accumulate(grads, *b, gout.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, gout.iter().map(|&g| g * *c).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                // dA = dOut · Bᵀ
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc = acc + gout[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = Aᵀ · dOut
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av_ip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] = db[p * n + j] + av_ip * gout[i * n + j];
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, gout.to_vec());
            }
            Op::GatherRows(a, rows) => {
                let (m, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut da = vec![F::zero(); m * d];
                for (out_r, &src_r) in rows.iter().enumerate() {
                    for j in 0..d {
                        da[src_r * d + j] = da[src_r * d + j] + gout[out_r * d + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    accumulate(grads, p, gout[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let w = end - start;
                let mut da = vec![F::zero(); m * d];
                for i in 0..m {
                    for j in 0..w {
                        da[i * d + start + j] = gout[i * w + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    let mut dp = vec![F::zero(); m * w];
                    for i in 0..m {
                        for j in 0..w {
                            dp[i * w + j] = gout[i * total + offset + j];
                        }
                    }
                    accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::RepeatRow(a, n) => {
                let d = self.nodes[a.0].shape[1];
                let mut da = vec![F::zero(); d];
                for i in 0..*n {
                    for j in 0..d {
                        da[j] = da[j] + gout[i * d + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::AddRow(a, row) => {
                let d = self.nodes[row.0].shape[1];
                let m = node.shape[0];
                accumulate(grads, *a, gout.to_vec());
                let mut dr = vec![F::zero(); d];
                for i in 0..m {
                    for j in 0..d {
                        dr[j] = dr[j] + gout[i * d + j];
                    }
                }
                accumulate(grads, *row, dr);
            }
            Op::Softmax(a) => {
                let (m, d) = (node.shape[0], node.shape[1]);
                let probs = &node.data;
                let mut da = vec![F::zero(); m * d];
                for i in 0..m {
                    let p = &probs[i * d..(i + 1) * d];
                    let g = &gout[i * d..(i + 1) * d];
                    let mut dot = F::zero();
                    for j in 0..d {
                        dot = dot + g[j] * p[j];
                    }
                    for j in 0..d {
                        da[i * d + j] = p[j] * (g[j] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, d) = (node.shape[0], node.shape[1]);
                let eps = F::from_f64(LAYER_NORM_EPS);
                let inv_d = F::from_f64(d as f64).recip();
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gamma.0].data;
                let mut dx = vec![F::zero(); m * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for i in 0..m {
                    let row = &xv[i * d..(i + 1) * d];
                    let g = &gout[i * d..(i + 1) * d];
                    let (mean, var) = row_mean_var(row);
                    let inv = (var + eps).sqrt().recip();
                    // dxhat and its two row statistics drive everything else.
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    let mut xhat = vec![F::zero(); d];
                    let mut dxhat = vec![F::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = g[j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + g[j] * xhat[j];
                        dbeta[j] = dbeta[j] + g[j];
                        dx[i * d + j] = inv
                            * (dxhat[j]
                                - inv_d * sum_dxhat
                                - xhat[j] * inv_d * sum_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].data;
                accumulate(
                    grads,
                    *a,
                    gout.iter()
                        .zip(av)
                        .map(|(&g, &x)| g * gelu_derivative(x))
                        .collect(),
                );
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].data;
                let two = F::from_f64(2.0);
                accumulate(
                    grads,
                    *a,
                    gout.iter().zip(av).map(|(&g, &x)| g * two * x).collect(),
                );
            }
            Op::Ln(a) => {
                let av = &self.nodes[a.0].data;
                accumulate(grads, *a, gout.iter().zip(av).map(|(&g, &x)| g / x).collect());
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                let g = gout[0] / F::from_f64(n as f64);
                accumulate(grads, *a, vec![g; n]);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].data.len();
                accumulate(grads, *a, vec![gout[0]; n]);
            }
            Op::MeanRows(a) => {
                let (m, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let inv = F::from_f64(m as f64).recip();
                let mut da = vec![F::zero(); m * d];
                for i in 0..m {
                    for j in 0..d {
                        da[i * d + j] = gout[j] * inv;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (m, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let src = &self.nodes[logits.0].data;
                let scale = gout[0] / F::from_f64(m as f64);
                let mut dl = vec![F::zero(); m * c];
                let mut probs = vec![F::zero(); c];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_row(&src[i * c..(i + 1) * c], &mut probs);
                    for j in 0..c {
                        let indicator = if j == t { F::one() } else { F::zero() };
                        dl[i * c + j] = scale * (probs[j] - indicator);
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn sum_in_order<F: Real>(xs: &[F]) -> F {
    xs.iter().fold(F::zero(), |acc, &x| acc + x)
}

fn row_mean_var<F: Real>(row: &[F]) -> (F, F) {
    let inv = F::from_f64(row.len() as f64).recip();
    let mean = sum_in_order(row) * inv;
    let mut var = F::zero();
    for &x in row {
        let d = x - mean;
        var = var + d * d;
    }
    (mean, var * inv)
}

fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}

fn gelu_value<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + gelu_inner(x).tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    let t = gelu_inner(x).tanh();
    // c·(1 + 3·0.044715·x²) is d(inner)/dx.
    let c = F::from_f64(SQRT_2_OVER_PI);
    let du = c * (F::one() + F::from_f64(3.0 * GELU_CUBIC) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_inner<F: Real>(x: F) -> F {
    F::from_f64(SQRT_2_OVER_PI) * (x + F::from_f64(GELU_CUBIC) * x * x * x)
}
