use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::{AutodiffError, NodeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Concatenation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    MaxPoolCols { input: usize, argmax: Vec<usize> },
    FrobeniusSq(usize),
    Mse(usize, usize),
    Transpose(usize),
    Inverse4(usize),
    GatherCols { input: usize, indices: Vec<usize> },
    TileCols { input: usize },
    Reshape(usize),
    MeanAggregate {
        input: usize,
        ends: Vec<(usize, usize)>,
        degree: Vec<usize>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    values: std::sync::Arc<Vec<f64>>,
    op: Op,
}

/// Ordered record of primitive operations for one forward pass.
///
/// Nodes are appended in execution order, so the record is topologically
/// ordered by construction; backward traverses it in exact reverse and
/// accumulates gradients additively at fan-out.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Tensor {
        let index = self.nodes.len();
        let values = std::sync::Arc::new(values);
        self.nodes.push(Node {
            rows,
            cols,
            values: values.clone(),
            op,
        });
        Tensor::with_node(
            rows,
            cols,
            values,
            NodeRef {
                tape: self.id,
                index,
            },
        )
    }

    /// Records a constant leaf (no gradient will flow into it).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Leaf { param: None },
        )
    }

    /// Records a parameter leaf; backward will accumulate into its gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let p = store.get(id);
        self.push(
            p.tensor().rows(),
            p.tensor().cols(),
            p.tensor().data().to_vec(),
            Op::Leaf { param: Some(id) },
        )
    }

    /// Resolves the node index of `t`, registering constants on the fly.
    fn node_of(&mut self, t: &Tensor, op: &'static str) -> Result<usize, AutodiffError> {
        match t.node {
            Some(nref) => {
                if nref.tape != self.id {
                    return Err(AutodiffError::TapeMismatch { op });
                }
                Ok(nref.index)
            }
            None => {
                let registered = self.constant(t);
                Ok(registered.node.expect("constant sets node").index)
            }
        }
    }

    fn shape_of(&self, idx: usize) -> (usize, usize) {
        (self.nodes[idx].rows, self.nodes[idx].cols)
    }

    // ── Primitive operations ─────────────────────────────────────────────

    /// Matrix product `a x b`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.cols() != b.rows() {
            return Err(shape_err("matmul", a, b));
        }
        let ia = self.node_of(a, "matmul")?;
        let ib = self.node_of(b, "matmul")?;
        let (p, q, r) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; p * r];
        mm(&mut out, a.data(), b.data(), p, q, r);
        Ok(self.push(p, r, out, Op::Matmul(ia, ib)))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", a, b));
        }
        let ia = self.node_of(a, "add")?;
        let ib = self.node_of(b, "add")?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(a.rows(), a.cols(), out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.shape() != b.shape() {
            return Err(shape_err("sub", a, b));
        }
        let ia = self.node_of(a, "sub")?;
        let ib = self.node_of(b, "sub")?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.push(a.rows(), a.cols(), out, Op::Sub(ia, ib)))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor, AutodiffError> {
        let ia = self.node_of(a, "scale")?;
        let out: Vec<f64> = a.data().iter().map(|x| x * factor).collect();
        Ok(self.push(a.rows(), a.cols(), out, Op::Scale(ia, factor)))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.node_of(a, "relu")?;
        let out: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(a.rows(), a.cols(), out, Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.node_of(a, "sigmoid")?;
        let out: Vec<f64> = a.data().iter().map(|x| sigmoid(*x)).collect();
        Ok(self.push(a.rows(), a.cols(), out, Op::Sigmoid(ia)))
    }

    /// Concatenates along the given axis (rows: stack vertically).
    pub fn concat(&mut self, a: &Tensor, b: &Tensor, axis: Axis) -> Result<Tensor, AutodiffError> {
        match axis {
            Axis::Rows => {
                if a.cols() != b.cols() {
                    return Err(shape_err("concat(rows)", a, b));
                }
                let ia = self.node_of(a, "concat")?;
                let ib = self.node_of(b, "concat")?;
                let mut out = Vec::with_capacity(a.data().len() + b.data().len());
                out.extend_from_slice(a.data());
                out.extend_from_slice(b.data());
                Ok(self.push(a.rows() + b.rows(), a.cols(), out, Op::ConcatRows(ia, ib)))
            }
            Axis::Cols => {
                if a.rows() != b.rows() {
                    return Err(shape_err("concat(cols)", a, b));
                }
                let ia = self.node_of(a, "concat")?;
                let ib = self.node_of(b, "concat")?;
                let cols = a.cols() + b.cols();
                let mut out = vec![0.0; a.rows() * cols];
                for r in 0..a.rows() {
                    out[r * cols..r * cols + a.cols()]
                        .copy_from_slice(&a.data()[r * a.cols()..(r + 1) * a.cols()]);
                    out[r * cols + a.cols()..(r + 1) * cols]
                        .copy_from_slice(&b.data()[r * b.cols()..(r + 1) * b.cols()]);
                }
                Ok(self.push(a.rows(), cols, out, Op::ConcatCols(ia, ib)))
            }
        }
    }

    /// Row-wise maximum over columns: `f x m -> f x 1`.
    ///
    /// Backward routes the gradient only to the argmax column of each row;
    /// ties go to the lowest column index.
    pub fn max_pool_cols(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.cols() == 0 {
            return Err(AutodiffError::EmptyPointSet);
        }
        let ia = self.node_of(a, "max_pool")?;
        let (rows, cols) = a.shape();
        let mut out = vec![f64::NEG_INFINITY; rows];
        let mut argmax = vec![0usize; rows];
        for r in 0..rows {
            for c in 0..cols {
                let v = a.data()[r * cols + c];
                if v > out[r] {
                    out[r] = v;
                    argmax[r] = c;
                }
            }
        }
        Ok(self.push(rows, 1, out, Op::MaxPoolCols { input: ia, argmax }))
    }

    /// Sum of squared entries (Frobenius norm squared), a 1x1 tensor.
    pub fn frobenius_sq(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.node_of(a, "frobenius_sq")?;
        let total: f64 = a.data().iter().map(|x| x * x).sum();
        Ok(self.push(1, 1, vec![total], Op::FrobeniusSq(ia)))
    }

    /// Mean squared error over all entries, a 1x1 tensor.
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.shape() != b.shape() {
            return Err(shape_err("mse", a, b));
        }
        let ia = self.node_of(a, "mse")?;
        let ib = self.node_of(b, "mse")?;
        let n = a.data().len() as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(1, 1, vec![total / n], Op::Mse(ia, ib)))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.node_of(a, "transpose")?;
        let (rows, cols) = a.shape();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a.data()[r * cols + c];
            }
        }
        Ok(self.push(cols, rows, out, Op::Transpose(ia)))
    }

    /// Inverse of a 4x4 matrix via Gauss-Jordan with partial pivoting plus
    /// one Newton refinement step.
    pub fn inverse4(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.shape() != (4, 4) {
            return Err(AutodiffError::InvalidShape {
                op: "inverse4",
                rows: a.rows(),
                cols: a.cols(),
                reason: "expected a 4x4 matrix",
            });
        }
        let ia = self.node_of(a, "inverse4")?;
        let inv = invert4(a.data()).ok_or(AutodiffError::IllConditioned {
            cond: f64::INFINITY,
            cap: f64::INFINITY,
        })?;
        Ok(self.push(4, 4, inv, Op::Inverse4(ia)))
    }

    /// Column selection `a[:, indices]`; indices may repeat. Backward
    /// scatter-adds into the selected columns.
    pub fn gather_cols(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor, AutodiffError> {
        for &idx in indices {
            if idx >= a.cols() {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "gather_cols",
                    index: idx,
                    cols: a.cols(),
                });
            }
        }
        let ia = self.node_of(a, "gather_cols")?;
        let (rows, cols) = a.shape();
        let k = indices.len();
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            for (t, &idx) in indices.iter().enumerate() {
                out[r * k + t] = a.data()[r * cols + idx];
            }
        }
        Ok(self.push(
            rows,
            k,
            out,
            Op::GatherCols {
                input: ia,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Broadcasts a column vector `f x 1` to `f x n`.
    pub fn tile_cols(&mut self, a: &Tensor, n: usize) -> Result<Tensor, AutodiffError> {
        if a.cols() != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "tile_cols",
                rows: a.rows(),
                cols: a.cols(),
                reason: "expected a column vector",
            });
        }
        let ia = self.node_of(a, "tile_cols")?;
        let rows = a.rows();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let v = a.data()[r];
            for c in 0..n {
                out[r * n + c] = v;
            }
        }
        Ok(self.push(rows, n, out, Op::TileCols { input: ia }))
    }

    /// Shape change preserving row-major element order.
    pub fn reshape(&mut self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor, AutodiffError> {
        if rows * cols != a.data().len() {
            return Err(AutodiffError::InvalidShape {
                op: "reshape",
                rows,
                cols,
                reason: "element count does not match",
            });
        }
        let ia = self.node_of(a, "reshape")?;
        Ok(self.push(rows, cols, a.data().to_vec(), Op::Reshape(ia)))
    }

    /// Mean over incident edges for every node of an undirected graph.
    ///
    /// `edge_latents` is `f x ne` with one column per edge; `ends[e]` are the
    /// two endpoint node indices of edge `e`. Output is `f x n_nodes`;
    /// isolated nodes aggregate a zero vector.
    pub fn mean_aggregate(
        &mut self,
        edge_latents: &Tensor,
        ends: &[(usize, usize)],
        n_nodes: usize,
    ) -> Result<Tensor, AutodiffError> {
        if edge_latents.cols() != ends.len() {
            return Err(AutodiffError::InvalidShape {
                op: "mean_aggregate",
                rows: edge_latents.rows(),
                cols: edge_latents.cols(),
                reason: "edge count does not match endpoint list",
            });
        }
        for &(a, b) in ends {
            if a >= n_nodes || b >= n_nodes {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "mean_aggregate",
                    index: a.max(b),
                    cols: n_nodes,
                });
            }
        }
        let ia = self.node_of(edge_latents, "mean_aggregate")?;
        let f = edge_latents.rows();
        let ne = ends.len();
        let mut degree = vec![0usize; n_nodes];
        for &(a, b) in ends {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut out = vec![0.0; f * n_nodes];
        let data = edge_latents.data();
        for (e, &(a, b)) in ends.iter().enumerate() {
            for r in 0..f {
                let v = data[r * ne + e];
                out[r * n_nodes + a] += v;
                out[r * n_nodes + b] += v;
            }
        }
        for (v, &deg) in degree.iter().enumerate() {
            if deg > 0 {
                let inv = 1.0 / deg as f64;
                for r in 0..f {
                    out[r * n_nodes + v] *= inv;
                }
            }
        }
        Ok(self.push(
            f,
            n_nodes,
            out,
            Op::MeanAggregate {
                input: ia,
                ends: ends.to_vec(),
                degree,
            },
        ))
    }

    /// Right pseudo-inverse `U+ = U^T (U U^T)^{-1}` of a `4 x d` matrix,
    /// `d >= 4`, satisfying `U U+ = I_4`.
    ///
    /// Errors when the Gram matrix `U U^T` has condition number above
    /// `cond_cap`; the error carries the condition estimate.
    pub fn right_pseudo_inverse(
        &mut self,
        u: &Tensor,
        cond_cap: f64,
    ) -> Result<Tensor, AutodiffError> {
        if u.rows() != 4 || u.cols() < 4 {
            return Err(AutodiffError::InvalidShape {
                op: "right_pseudo_inverse",
                rows: u.rows(),
                cols: u.cols(),
                reason: "expected 4 x d with d >= 4",
            });
        }
        let ut = self.transpose(u)?;
        let gram = self.matmul(u, &ut)?;
        let cond = symmetric4_condition(gram.data());
        if !cond.is_finite() || cond > cond_cap {
            return Err(AutodiffError::IllConditioned {
                cond,
                cap: cond_cap,
            });
        }
        let inv = self.inverse4(&gram)?;
        self.matmul(&ut, &inv)
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, AutodiffError> {
        if !loss.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                rows: loss.rows(),
                cols: loss.cols(),
            });
        }
        let root = match loss.node {
            Some(nref) if nref.tape == self.id => nref.index,
            _ => return Err(AutodiffError::TapeMismatch { op: "backward" }),
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            per_node: grads,
        })
    }

    /// Backward pass that accumulates gradients onto every bound parameter.
    ///
    /// Parameters not reached by the loss keep their current (zeroed)
    /// gradient. Accumulation is additive: two backward calls without an
    /// intervening [`ParamStore::zero_gradients`] double the gradients.
    pub fn backward_into(
        &self,
        loss: &Tensor,
        store: &mut ParamStore,
    ) -> Result<(), AutodiffError> {
        let grads = self.backward(loss)?;
        self.accumulate_params(&grads, store);
        Ok(())
    }

    /// Adds the parameter slice of `grads` onto the store's gradients.
    pub fn accumulate_params(&self, grads: &Gradients, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(Some(g)) = grads.per_node.get(idx) {
                    store.get_mut(id).add_to_gradient(g);
                }
            }
        }
    }

    /// Collects per-parameter gradients without touching the store.
    ///
    /// Used for parallel batch processing: each tape produces its own
    /// contribution and the caller reduces them in a fixed order.
    pub fn param_gradients(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(Some(g)) = grads.per_node.get(idx) {
                    match &mut out[id.index()] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(ia, ib) => {
                let (p, q) = self.shape_of(*ia);
                let (_, r) = self.shape_of(*ib);
                // dA = G * B^T
                {
                    let b = &self.nodes[*ib].values;
                    let da = ensure(grads, *ia, p * q);
                    mm_a_bt(da, g, b, p, r, q);
                }
                // dB = A^T * G
                {
                    let a = &self.nodes[*ia].values;
                    let db = ensure(grads, *ib, q * r);
                    mm_at_b(db, a, g, p, q, r);
                }
            }
            Op::Add(ia, ib) => {
                add_into(ensure(grads, *ia, g.len()), g);
                add_into(ensure(grads, *ib, g.len()), g);
            }
            Op::Sub(ia, ib) => {
                add_into(ensure(grads, *ia, g.len()), g);
                let db = ensure(grads, *ib, g.len());
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Scale(ia, factor) => {
                let da = ensure(grads, *ia, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += factor * gi;
                }
            }
            Op::Relu(ia) => {
                let x = &self.nodes[*ia].values;
                let da = ensure(grads, *ia, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(ia) => {
                let s = &node.values;
                let da = ensure(grads, *ia, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * s[i] * (1.0 - s[i]);
                }
            }
            Op::ConcatRows(ia, ib) => {
                let na = self.nodes[*ia].values.len();
                add_into(ensure(grads, *ia, na), &g[..na]);
                add_into(ensure(grads, *ib, g.len() - na), &g[na..]);
            }
            Op::ConcatCols(ia, ib) => {
                let (rows, ca) = self.shape_of(*ia);
                let cb = self.shape_of(*ib).1;
                let cols = ca + cb;
                let da = ensure(grads, *ia, rows * ca);
                for r in 0..rows {
                    for c in 0..ca {
                        da[r * ca + c] += g[r * cols + c];
                    }
                }
                let db = ensure(grads, *ib, rows * cb);
                for r in 0..rows {
                    for c in 0..cb {
                        db[r * cb + c] += g[r * cols + ca + c];
                    }
                }
            }
            Op::MaxPoolCols { input, argmax } => {
                let cols = self.shape_of(*input).1;
                let da = ensure(grads, *input, argmax.len() * cols);
                for (r, &c) in argmax.iter().enumerate() {
                    da[r * cols + c] += g[r];
                }
            }
            Op::FrobeniusSq(ia) => {
                let x = &self.nodes[*ia].values;
                let da = ensure(grads, *ia, x.len());
                let s = 2.0 * g[0];
                for i in 0..x.len() {
                    da[i] += s * x[i];
                }
            }
            Op::Mse(ia, ib) => {
                let a = &self.nodes[*ia].values;
                let b = &self.nodes[*ib].values;
                let s = 2.0 * g[0] / a.len() as f64;
                {
                    let da = ensure(grads, *ia, a.len());
                    for i in 0..a.len() {
                        da[i] += s * (a[i] - b[i]);
                    }
                }
                let db = ensure(grads, *ib, b.len());
                for i in 0..b.len() {
                    db[i] -= s * (a[i] - b[i]);
                }
            }
            Op::Transpose(ia) => {
                let (rows, cols) = self.shape_of(*ia);
                let da = ensure(grads, *ia, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::Inverse4(ia) => {
                // d(A^{-1}) rule: dA = -W^T G W^T with W = A^{-1}.
                let w = &node.values;
                let mut wt = [0.0; 16];
                for r in 0..4 {
                    for c in 0..4 {
                        wt[c * 4 + r] = w[r * 4 + c];
                    }
                }
                let mut tmp = [0.0; 16];
                mm(&mut tmp, &wt, g, 4, 4, 4);
                let mut full = [0.0; 16];
                mm(&mut full, &tmp, &wt, 4, 4, 4);
                let da = ensure(grads, *ia, 16);
                for i in 0..16 {
                    da[i] -= full[i];
                }
            }
            Op::GatherCols { input, indices } => {
                let (rows, cols) = self.shape_of(*input);
                let k = indices.len();
                let da = ensure(grads, *input, rows * cols);
                for r in 0..rows {
                    for (t, &idx) in indices.iter().enumerate() {
                        da[r * cols + idx] += g[r * k + t];
                    }
                }
            }
            Op::TileCols { input } => {
                let rows = self.shape_of(*input).0;
                let n = node.cols;
                let da = ensure(grads, *input, rows);
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += g[r * n + c];
                    }
                    da[r] += s;
                }
            }
            Op::Reshape(ia) => {
                add_into(ensure(grads, *ia, g.len()), g);
            }
            Op::MeanAggregate {
                input,
                ends,
                degree,
            } => {
                let f = node.rows;
                let ne = ends.len();
                let nn = node.cols;
                let da = ensure(grads, *input, f * ne);
                for (e, &(a, b)) in ends.iter().enumerate() {
                    let wa = 1.0 / degree[a] as f64;
                    let wb = 1.0 / degree[b] as f64;
                    for r in 0..f {
                        da[r * ne + e] += wa * g[r * nn + a] + wb * g[r * nn + b];
                    }
                }
            }
        }
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    tape: u64,
    per_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` was reached.
    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        let nref = t.node?;
        if nref.tape != self.tape {
            return None;
        }
        self.per_node.get(nref.index)?.as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs_rows: a.rows(),
        lhs_cols: a.cols(),
        rhs_rows: b.rows(),
        rhs_cols: b.cols(),
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Dense kernels (row-major) ────────────────────────────────────────────

/// `out += a x b` with `a: p x q`, `b: q x r`.
pub(crate) fn mm(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a^T x b` with `a: p x q`, `b: p x r`, out `q x r`.
fn mm_at_b(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let brow = &b[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a x b^T` with `a: p x q`, `b: r x q`, out `p x r`.
fn mm_a_bt(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            orow[j] += s;
        }
    }
}

/// Gauss-Jordan inverse of a 4x4 matrix with partial pivoting and one
/// Newton refinement step (`W <- W (2I - A W)`).
fn invert4(a: &[f64]) -> Option<Vec<f64>> {
    let n = 4;
    let mut aug = [0.0f64; 32];
    for r in 0..n {
        for c in 0..n {
            aug[r * 8 + c] = a[r * n + c];
        }
        aug[r * 8 + n + r] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        let mut best = aug[col * 8 + col].abs();
        for r in col + 1..n {
            let v = aug[r * 8 + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..2 * n {
                aug.swap(col * 8 + c, pivot * 8 + c);
            }
        }
        let inv_p = 1.0 / aug[col * 8 + col];
        for c in 0..2 * n {
            aug[col * 8 + c] *= inv_p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r * 8 + col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        aug[r * 8 + c] -= f * aug[col * 8 + c];
                    }
                }
            }
        }
    }
    let mut w = vec![0.0; 16];
    for r in 0..n {
        for c in 0..n {
            w[r * n + c] = aug[r * 8 + n + c];
        }
    }
    // Newton step tightens the residual to near machine precision.
    let mut aw = [0.0; 16];
    mm(&mut aw, a, &w, 4, 4, 4);
    let mut two_minus = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            two_minus[r * 4 + c] = if r == c { 2.0 } else { 0.0 } - aw[r * 4 + c];
        }
    }
    let mut refined = vec![0.0; 16];
    mm(&mut refined, &w, &two_minus, 4, 4, 4);
    if refined.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(refined)
}

/// Condition number (ratio of extreme eigenvalues) of a symmetric PSD 4x4
/// matrix via cyclic Jacobi sweeps.
pub(crate) fn symmetric4_condition(m: &[f64]) -> f64 {
    let mut a = [0.0f64; 16];
    a.copy_from_slice(&m[..16]);
    for _ in 0..12 {
        let mut off = 0.0;
        for p in 0..4 {
            for q in p + 1..4 {
                off += a[p * 4 + q] * a[p * 4 + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                let apq = a[p * 4 + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * 4 + p];
                let aqq = a[q * 4 + q];
                // Standard Jacobi rotation annihilating a[p][q].
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[k * 4 + p];
                    let akq = a[k * 4 + q];
                    a[k * 4 + p] = c * akp - s * akq;
                    a[k * 4 + q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p * 4 + k];
                    let aqk = a[q * 4 + k];
                    a[p * 4 + k] = c * apk - s * aqk;
                    a[q * 4 + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let eigs = [a[0], a[5], a[10], a[15]];
    let max = eigs.iter().cloned().fold(f64::MIN, f64::max);
    let min = eigs.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
