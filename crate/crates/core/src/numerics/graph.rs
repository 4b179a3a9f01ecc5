//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every training step: operations evaluate
//! eagerly, record themselves on the tape, and [`Graph::backward`] replays
//! the tape in reverse. Parameters live in a [`ParamStore`] owned by the
//! model; [`Graph::param`] copies a parameter's current values onto the tape
//! and remembers the binding so gradients can be routed back afterwards.
//!
//! Shape violations are programmer errors and panic. Tensors are 2-D on the
//! tape: scalars are 1x1 and vectors are 1xN rows.

use super::rng::RngState;
use super::tensor::Tensor;

pub type NodeId = usize;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named, persistent parameter tensor with a stage tag for progressive
/// freezing (0 = base model, i = attribute stage i).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub stage_tag: usize,
    pub trainable: bool,
    pub tensor: Tensor,
}

/// Owns every parameter of a model instance.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, stage_tag: usize, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        assert!(tensor.all_finite(), "non-finite init for parameter {name}");
        self.params.push(Param { name, stage_tag, trainable: true, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect()
    }

    /// Set the trainable flag per parameter from its stage tag.
    pub fn set_trainable_by_stage(&mut self, pred: impl Fn(usize) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p.stage_tag);
        }
    }

    /// Write gradients produced by [`Graph::param_grads`] into the parameter
    /// tensors' grad buffers (clearing all others).
    pub fn set_grads(&mut self, grads: Vec<(ParamId, Vec<f64>)>) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
        for (id, g) in grads {
            self.params[id.0].tensor.grad = Some(g);
        }
    }
}

/// Tape entry: how a node's value was produced, for the backward sweep.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    NllRows { logp: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    t: Tensor,
    op: Op,
}

/// Dynamic compute graph over a read-only parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    /// param index -> node, memoized so tied weights share one node.
    bound: Vec<Option<NodeId>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), bound: vec![None; store.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n].t
    }

    pub fn grad(&self, n: NodeId) -> Option<&[f64]> {
        self.nodes[n].t.grad.as_deref()
    }

    fn push(&mut self, mut t: Tensor, op: Op, requires_grad: bool) -> NodeId {
        t.requires_grad = requires_grad;
        self.nodes.push(Node { t, op });
        self.nodes.len() - 1
    }

    fn rg(&self, n: NodeId) -> bool {
        self.nodes[n].t.requires_grad
    }

    // ── Sources ──────────────────────────────────────────────────────

    /// Constant: no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        assert!(t.all_finite(), "non-finite leaf values");
        self.push(t, Op::Leaf, false)
    }

    /// Constant built from raw rows x cols data.
    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.leaf(Tensor::new(vec![rows, cols], data))
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Tensor::scalar(x))
    }

    /// Bind a parameter onto the tape. Repeated binds of the same parameter
    /// return the same node, so gradient contributions accumulate naturally
    /// (this is what makes weight tying work).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let p = self.store.get(id);
        let n = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.bound[id.0] = n.into();
        n
    }

    // ── Elementwise binary (same shape, or scalar broadcast either side) ──

    fn bin_shape(&self, a: NodeId, b: NodeId, what: &str) -> (usize, usize) {
        let (ta, tb) = (&self.nodes[a].t, &self.nodes[b].t);
        if ta.shape == tb.shape {
            (ta.rows(), ta.cols())
        } else if tb.is_scalar() {
            (ta.rows(), ta.cols())
        } else if ta.is_scalar() {
            (tb.rows(), tb.cols())
        } else {
            panic!("{what}: incompatible shapes {:?} vs {:?}", ta.shape, tb.shape);
        }
    }

    fn bin(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.bin_shape(a, b, what);
        let (ta, tb) = (&self.nodes[a].t, &self.nodes[b].t);
        let n = r * c;
        let mut out = Vec::with_capacity(n);
        if ta.shape == tb.shape {
            for i in 0..n {
                out.push(f(ta.data[i], tb.data[i]));
            }
        } else if tb.is_scalar() {
            let s = tb.data[0];
            for i in 0..n {
                out.push(f(ta.data[i], s));
            }
        } else {
            let s = ta.data[0];
            for i in 0..n {
                out.push(f(s, tb.data[i]));
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.bin(a, b, "add", |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.bin(a, b, "sub", |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.bin(a, b, "mul", |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.bin(a, b, "div", |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    /// (m x n) + (1 x n) with the row broadcast over all m rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (&self.nodes[a].t, &self.nodes[row].t);
        assert_eq!(tr.rows(), 1, "add_row: rhs must be 1 x n, got {:?}", tr.shape);
        assert_eq!(ta.cols(), tr.cols(), "add_row: width mismatch {:?} vs {:?}", ta.shape, tr.shape);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(ta.data[i * c + j] + tr.data[j]);
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::new(vec![r, c], out), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = {
            let ta = &self.nodes[a].t;
            Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x * c).collect())
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = {
            let ta = &self.nodes[a].t;
            Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x + c).collect())
        };
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = &self.nodes[a].t;
        Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let t = self.unary(a, f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let t = self.unary(a, f64::sqrt);
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].t, &self.nodes[b].t);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul: inner dims {:?} x {:?}", ta.shape, tb.shape);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].t;
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(a), rg)
    }

    // ── Row-wise normalizations ──────────────────────────────────────

    /// Numerically stabilized softmax along the last axis (per row).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].t;
        let (r, c) = (ta.rows(), ta.cols());
        assert!(c > 0, "softmax over empty rows");
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let exps: Vec<f64> = row
                .iter()
                .map(|&x| {
                    let e = (x - m).exp();
                    sum += e;
                    e
                })
                .collect();
            out.extend(exps.into_iter().map(|e| e / sum));
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, c], out), Op::SoftmaxRows(a), rg)
    }

    /// Numerically stabilized log-softmax along the last axis.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].t;
        let (r, c) = (ta.rows(), ta.cols());
        assert!(c > 0, "log_softmax over empty rows");
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, c], out), Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row layer normalization followed by the affine `gain * x_hat + bias`.
    /// `gain` and `bias` are 1 x n rows.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (tx, tg, tb) = (&self.nodes[x].t, &self.nodes[gain].t, &self.nodes[bias].t);
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.shape, vec![1, c], "layer_norm gain shape {:?}", tg.shape);
        assert_eq!(tb.shape, vec![1, c], "layer_norm bias shape {:?}", tb.shape);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.push(tg.data[j] * (row[j] - mean) * inv + tb.data[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::new(vec![r, c], out), Op::LayerNormRows { x, gain, bias, eps }, rg)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].t.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].t;
        let s = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.nodes[parts[0]].t.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = &self.nodes[p].t;
            assert_eq!(tp.cols(), c, "concat_rows: width mismatch");
            rows += tp.rows();
            data.extend_from_slice(&tp.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows r0..r1 (half-open).
    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let ta = &self.nodes[a].t;
        let c = ta.cols();
        assert!(r0 <= r1 && r1 <= ta.rows(), "slice_rows {r0}..{r1} of {:?}", ta.shape);
        let data = ta.data[r0 * c..r1 * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r1 - r0, c], data), Op::SliceRows(a, r0, r1), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.nodes[parts[0]].t.rows();
        let total_c: usize = parts.iter().map(|&p| self.nodes[p].t.cols()).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let tp = &self.nodes[p].t;
                assert_eq!(tp.rows(), r, "concat_cols: row mismatch");
                data.extend_from_slice(tp.row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![r, total_c], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns c0..c1 (half-open).
    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let ta = &self.nodes[a].t;
        let (r, c) = (ta.rows(), ta.cols());
        assert!(c0 <= c1 && c1 <= c, "slice_cols {c0}..{c1} of {:?}", ta.shape);
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * c + c0..i * c + c1]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, w], data), Op::SliceCols(a, c0, c1), rg)
    }

    /// Row lookup: out[i] = table[ids[i]]. Gradient scatters back by id.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tt = &self.nodes[table].t;
        let c = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < tt.rows(), "gather_rows: id {id} out of {} rows", tt.rows());
            data.extend_from_slice(tt.row_slice(id));
        }
        let rg = self.rg(table);
        self.push(Tensor::new(vec![ids.len(), c], data), Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// Mean negative log-likelihood over the mask-selected rows of a
    /// log-probability matrix: -(1/k) * sum logp[i, targets[i]].
    pub fn nll_rows(&mut self, logp: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let tl = &self.nodes[logp].t;
        assert_eq!(tl.rows(), targets.len(), "nll_rows: target count");
        assert_eq!(tl.rows(), mask.len(), "nll_rows: mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "nll_rows: all rows masked out");
        let mut s = 0.0;
        for i in 0..targets.len() {
            if mask[i] {
                assert!(targets[i] < tl.cols(), "nll_rows: target id out of vocab");
                s -= tl.at(i, targets[i]);
            }
        }
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(s / count as f64),
            Op::NllRows { logp, targets: targets.to_vec(), mask: mask.to_vec() },
            rg,
        )
    }

    // ── Composite helpers ────────────────────────────────────────────

    /// Reparameterized Gaussian sample: z = mu + exp(0.5 * logvar) * eps,
    /// with eps drawn from the standard normal. Gradients flow to mu and
    /// logvar through the sample.
    pub fn sample_gaussian(&mut self, mean: NodeId, logvar: NodeId, rng: &mut RngState) -> NodeId {
        let (tm, tv) = (&self.nodes[mean].t, &self.nodes[logvar].t);
        assert_eq!(tm.shape, tv.shape, "sample_gaussian: mean/logvar shapes differ");
        assert!(tm.all_finite() && tv.all_finite(), "sample_gaussian: non-finite params");
        let n = tm.numel();
        let (r, c) = (tm.rows(), tm.cols());
        let eps = self.leaf(Tensor::new(vec![r, c], rng.normal_vec(n)));
        let half = self.scale(logvar, 0.5);
        let sigma = self.exp(half);
        let noise = self.mul(sigma, eps);
        self.add(mean, noise)
    }

    /// Inverted-dropout mask applied in place of the identity when p > 0.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut RngState) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let ta = &self.nodes[a].t;
        let (r, c) = (ta.rows(), ta.cols());
        let keep = 1.0 - p;
        let mask: Vec<f64> =
            (0..r * c).map(|_| if rng.uniform() < p { 0.0 } else { 1.0 / keep }).collect();
        let m = self.leaf(Tensor::new(vec![r, c], mask));
        self.mul(a, m)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node insertion order is already a
    /// topological order, so the tape is walked once from back to front.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(self.nodes[loss].t.is_scalar(), "backward from non-scalar node");
        assert!(
            self.nodes[loss].t.data[0].is_finite(),
            "backward from non-finite loss {}",
            self.nodes[loss].t.data[0]
        );
        for n in &mut self.nodes {
            n.t.grad = None;
        }
        self.nodes[loss].t.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].t.requires_grad || self.nodes[i].t.grad.is_none() {
                continue;
            }
            let g = self.nodes[i].t.grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &op, &g);
        }
    }

    fn accumulate(&mut self, n: NodeId, delta: impl Fn(usize) -> f64) {
        if !self.nodes[n].t.requires_grad {
            return;
        }
        let len = self.nodes[n].t.numel();
        let buf = self.nodes[n].t.grad.get_or_insert_with(|| vec![0.0; len]);
        for i in 0..len {
            buf[i] += delta(i);
        }
    }

    #[allow(clippy::too_many_lines)]
    fn apply_backward(&mut self, out: NodeId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_full_or_scalar(a, g, |_, gi| gi);
                self.acc_full_or_scalar(b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_full_or_scalar(a, g, |_, gi| gi);
                self.acc_full_or_scalar(b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (da, db) = self.bin_partials(a, b, g, |x, y, gi| (gi * y, gi * x));
                self.acc_vec(a, da);
                self.acc_vec(b, db);
            }
            Op::Div(a, b) => {
                let (da, db) =
                    self.bin_partials(a, b, g, |x, y, gi| (gi / y, -gi * x / (y * y)));
                self.acc_vec(a, da);
                self.acc_vec(b, db);
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, |i| g[i]);
                if self.rg(row) {
                    let c = self.nodes[row].t.cols();
                    let r = g.len() / c;
                    let mut dr = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += g[i * c + j];
                        }
                    }
                    self.acc_vec(row, Some(dr));
                }
            }
            Op::Scale(a, c) => self.accumulate(a, |i| g[i] * c),
            Op::AddScalar(a) => self.accumulate(a, |i| g[i]),
            Op::Relu(a) => {
                let xs = self.nodes[a].t.data.clone();
                self.accumulate(a, |i| if xs[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Exp(a) => {
                let ys = self.nodes[out].t.data.clone();
                self.accumulate(a, |i| g[i] * ys[i]);
            }
            Op::Ln(a) => {
                let xs = self.nodes[a].t.data.clone();
                self.accumulate(a, |i| g[i] / xs[i]);
            }
            Op::Sqrt(a) => {
                let ys = self.nodes[out].t.data.clone();
                self.accumulate(a, |i| g[i] * 0.5 / ys[i]);
            }
            Op::Clamp(a, lo, hi) => {
                let xs = self.nodes[a].t.data.clone();
                self.accumulate(a, |i| if xs[i] > lo && xs[i] < hi { g[i] } else { 0.0 });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].t.rows(), self.nodes[a].t.cols());
                let n = self.nodes[b].t.cols();
                if self.rg(a) {
                    // dA = G @ B^T
                    let bt = transpose_raw(&self.nodes[b].t.data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.acc_vec(a, Some(da));
                }
                if self.rg(b) {
                    // dB = A^T @ G
                    let at = transpose_raw(&self.nodes[a].t.data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.acc_vec(b, Some(db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[out].t.rows(), self.nodes[out].t.cols());
                let gt = transpose_raw(g, r, c);
                self.acc_vec(a, Some(gt));
            }
            Op::SoftmaxRows(a) => {
                if self.rg(a) {
                    let y = &self.nodes[out].t;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y.data[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc_vec(a, Some(dx));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.rg(a) {
                    let y = &self.nodes[out].t;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y.data[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            dx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.acc_vec(a, Some(dx));
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let tx = &self.nodes[x].t;
                let (r, c) = (tx.rows(), tx.cols());
                let tg = self.nodes[gain].t.data.clone();
                let xd = tx.data.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..c).map(|j| gr[j] * tg[j]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.acc_vec(x, Some(dx));
                self.acc_vec(gain, Some(dgain));
                self.acc_vec(bias, Some(dbias));
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.accumulate(a, |_| g0);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].t.numel() as f64;
                let g0 = g[0] / n;
                self.accumulate(a, |_| g0);
            }
            Op::ConcatRows(ref parts) => {
                let c = self.nodes[out].t.cols();
                let mut r0 = 0;
                for &p in parts {
                    let pr = self.nodes[p].t.rows();
                    if self.rg(p) {
                        let seg = g[r0 * c..(r0 + pr) * c].to_vec();
                        self.acc_vec(p, Some(seg));
                    }
                    r0 += pr;
                }
            }
            Op::SliceRows(a, r0, _) => {
                if self.rg(a) {
                    let c = self.nodes[a].t.cols();
                    let n = self.nodes[a].t.numel();
                    let mut da = vec![0.0; n];
                    da[r0 * c..r0 * c + g.len()].copy_from_slice(g);
                    self.acc_vec(a, Some(da));
                }
            }
            Op::ConcatCols(ref parts) => {
                let r = self.nodes[out].t.rows();
                let total_c = self.nodes[out].t.cols();
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.nodes[p].t.cols();
                    if self.rg(p) {
                        let mut dp = vec![0.0; r * pc];
                        for i in 0..r {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * total_c + c0..i * total_c + c0 + pc]);
                        }
                        self.acc_vec(p, Some(dp));
                    }
                    c0 += pc;
                }
            }
            Op::SliceCols(a, c0, c1) => {
                if self.rg(a) {
                    let (r, c) = (self.nodes[a].t.rows(), self.nodes[a].t.cols());
                    let w = c1 - c0;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.acc_vec(a, Some(da));
                }
            }
            Op::GatherRows(table, ref ids) => {
                if self.rg(table) {
                    let c = self.nodes[table].t.cols();
                    let n = self.nodes[table].t.numel();
                    let mut dt = vec![0.0; n];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[i * c + j];
                        }
                    }
                    self.acc_vec(table, Some(dt));
                }
            }
            Op::NllRows { logp, ref targets, ref mask } => {
                if self.rg(logp) {
                    let c = self.nodes[logp].t.cols();
                    let n = self.nodes[logp].t.numel();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let mut dl = vec![0.0; n];
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            dl[i * c + t] -= g[0] / count;
                        }
                    }
                    self.acc_vec(logp, Some(dl));
                }
            }
        }
    }

    /// Accumulate a same-shape or reduce-to-scalar gradient for `Add`/`Sub`.
    fn acc_full_or_scalar(&mut self, n: NodeId, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.rg(n) {
            return;
        }
        if self.nodes[n].t.is_scalar() && g.len() > 1 {
            let s: f64 = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum();
            self.acc_vec(n, Some(vec![s]));
        } else {
            self.accumulate(n, |i| f(i, g[i]));
        }
    }

    /// Partials for elementwise binary ops with optional scalar broadcast.
    fn bin_partials(
        &self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (ta, tb) = (&self.nodes[a].t, &self.nodes[b].t);
        let need_a = ta.requires_grad;
        let need_b = tb.requires_grad;
        if !need_a && !need_b {
            return (None, None);
        }
        let mut da = if need_a { Some(vec![0.0; ta.numel()]) } else { None };
        let mut db = if need_b { Some(vec![0.0; tb.numel()]) } else { None };
        for (i, &gi) in g.iter().enumerate() {
            let x = if ta.is_scalar() { ta.data[0] } else { ta.data[i] };
            let y = if tb.is_scalar() { tb.data[0] } else { tb.data[i] };
            let (pa, pb) = f(x, y, gi);
            if let Some(v) = da.as_mut() {
                v[if ta.is_scalar() { 0 } else { i }] += pa;
            }
            if let Some(v) = db.as_mut() {
                v[if tb.is_scalar() { 0 } else { i }] += pb;
            }
        }
        (da, db)
    }

    fn acc_vec(&mut self, n: NodeId, delta: Option<Vec<f64>>) {
        let Some(d) = delta else { return };
        if !self.rg(n) {
            return;
        }
        let len = self.nodes[n].t.numel();
        debug_assert_eq!(d.len(), len);
        let buf = self.nodes[n].t.grad.get_or_insert_with(|| vec![0.0; len]);
        for i in 0..len {
            buf[i] += d[i];
        }
    }

    /// Gradients for every trainable parameter bound into this graph, in
    /// binding order. Parameters a gradient never reached get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out = Vec::new();
        for (idx, node) in self.bound.iter().enumerate() {
            let Some(n) = node else { continue };
            if !self.store.get(ParamId(idx)).trainable {
                continue;
            }
            let g = match &self.nodes[*n].t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[*n].t.numel()],
            };
            out.push((ParamId(idx), g));
        }
        out
    }
}

/// Plain triple-loop matrix product (row-major).
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
