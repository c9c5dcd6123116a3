//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is an arena of nodes. Every operation appends a node holding
//! its computed value and the ids of its inputs, so node ids are always in
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Graphs are cheap to build and are rebuilt for every forward pass.
//!
//! All row-wise kernels compute each output row from the matching input row
//! only, in a fixed summation order. Batched evaluation is therefore bitwise
//! identical to evaluating the rows one at a time.

use rayon::prelude::*;
use thiserror::Error;

/// Work (in output scalars) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse operation kind, exposed for graph inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    LeakyRelu,
    Sigmoid,
    SoftmaxRows,
    LayerNorm,
    BatchMatMul,
    SliceLast,
    ConcatLast,
    PrependRow,
    SelectRow,
    Reshape,
    Sum,
    MseLoss,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        p: usize,
        n: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        p: usize,
        n: usize,
        transpose_b: bool,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
        width: usize,
    },
    ConcatLast {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    PrependRow {
        x: NodeId,
        row: NodeId,
        batch: usize,
        n: usize,
        d: usize,
    },
    SelectRow {
        x: NodeId,
        index: usize,
        batch: usize,
        n: usize,
        d: usize,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    MseLoss {
        a: NodeId,
        b: NodeId,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::ConcatLast { .. } => OpKind::ConcatLast,
            Op::PrependRow { .. } => OpKind::PrependRow,
            Op::SelectRow { .. } => OpKind::SelectRow,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::MseLoss { .. } => OpKind::MseLoss,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBroadcast { a, b }
            | Op::Mul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::MseLoss { a, b } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Scale { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::SoftmaxRows { x, .. }
            | Op::SliceLast { x, .. }
            | Op::SelectRow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatLast { parts, .. } => parts.clone(),
            Op::PrependRow { x, row, .. } => vec![*x, *row],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation: an append-only tape of nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `out` into rows of `width` and fills each with `f(row_index, row)`,
/// in parallel when the output is large.
fn fill_rows<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if out.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out[rows×n] += a[rows×p] · b[p×n]`, one output row per input row.
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, n: usize) {
    fill_rows(out, n, |i, row| {
        let ar = &a[i * p..(i + 1) * p];
        for (k, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = &b[k * n..(k + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(br) {
                *o += aik * bkj;
            }
        }
    });
}

/// `out[rows×p] += g[rows×n] · b[p×n]ᵀ`.
fn gemm_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], p: usize, n: usize) {
    fill_rows(out, p, |i, row| {
        let gr = &g[i * n..(i + 1) * n];
        for (k, o) in row.iter_mut().enumerate() {
            let br = &b[k * n..(k + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in gr.iter().zip(br) {
                s += gv * bv;
            }
            *o += s;
        }
    });
}

/// `out[p×n] += a[rows×p]ᵀ · g[rows×n]`, reduced over rows in order.
fn gemm_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], rows: usize, p: usize, n: usize) {
    fill_rows(out, n, |k, row| {
        for i in 0..rows {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let gr = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(gr) {
                *o += aik * gv;
            }
        }
    });
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf node. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_grad()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Input ids of a node, in operand order.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> NodeId {
        if !matches!(op, Op::Leaf) {
            value.requires_grad = op
                .inputs()
                .iter()
                .any(|&i| self.nodes[i.0].value.requires_grad);
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn new_node(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        let t = Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        };
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.val(a).values(), self.val(b).values(), p, n);
        Ok(self.new_node(vec![m, n], out, Op::MatMul { a, b, m, p, n }))
    }

    /// `x · w + b` over all leading axes of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.val(x).shape(), self.val(w).shape());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(shape_err("linear", sx, sw));
        }
        let (inp, out_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = self.val(b).shape();
            if sb != [out_dim] {
                return Err(shape_err("linear bias", sb, &[out_dim]));
            }
        }
        let rows = self.val(x).rows();
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.val(b).values();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        gemm_acc(&mut out, self.val(x).values(), self.val(w).values(), inp, out_dim);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out_dim;
        Ok(self.new_node(
            shape,
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out: out_dim,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.new_node(shape, out, Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let blen = tb.len();
        let bv = tb.values();
        let out = ta
            .values()
            .chunks(blen)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.new_node(shape, out, Op::AddBroadcast { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.new_node(shape, out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.val(x);
        let out = t.values().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.new_node(shape, out, Op::Scale { x, factor })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let t = self.val(x);
        let out = t
            .values()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = t.shape().to_vec();
        self.new_node(shape, out, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let out = t.values().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = t.shape().to_vec();
        self.new_node(shape, out, Op::Sigmoid { x })
    }

    /// Softmax over the last axis, with row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.val(x);
        let cols = t.last_dim();
        let src = t.values();
        let mut out = vec![0.0; src.len()];
        fill_rows(&mut out, cols, |i, row| {
            let xr = &src[i * cols..(i + 1) * cols];
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row.iter_mut().zip(xr) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row.iter_mut() {
                *o /= sum;
            }
        });
        let shape = t.shape().to_vec();
        self.new_node(shape, out, Op::SoftmaxRows { x, cols })
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.val(x);
        let d = t.last_dim();
        for (name, id) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            let s = self.val(id).shape();
            if s != [d] {
                return Err(shape_err(name, s, &[d]));
            }
        }
        let src = t.values();
        let rows = t.rows();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for ((xr, hr), is) in src
            .chunks(d)
            .zip(xhat.chunks_mut(d))
            .zip(inv_std.iter_mut())
        {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            *is = s;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * s;
            }
        }
        let g = self.val(gain).values();
        let b = self.val(bias).values();
        let out = xhat
            .chunks(d)
            .flat_map(|hr| hr.iter().zip(g).zip(b).map(|((h, g), b)| g * h + b))
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.new_node(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batched matrix product over matching leading axes:
    /// `[..., m, p] · [..., p, n]`, or `[..., m, p] · [..., n, p]ᵀ` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (m, p) = (sa[r - 2], sa[r - 1]);
        let n = if transpose_b {
            if sb[r - 1] != p {
                return Err(shape_err("batch_matmul", sa, sb));
            }
            sb[r - 2]
        } else {
            if sb[r - 2] != p {
                return Err(shape_err("batch_matmul", sa, sb));
            }
            sb[r - 1]
        };
        let batch: usize = sa[..r - 2].iter().product();
        let av = self.val(a).values();
        let bv = self.val(b).values();
        let mut out = vec![0.0; batch * m * n];
        let kernel = |bi: usize, block: &mut [f64]| {
            let ab = &av[bi * m * p..(bi + 1) * m * p];
            let bb = &bv[bi * p * n..(bi + 1) * p * n];
            if transpose_b {
                for (i, row) in block.chunks_mut(n).enumerate() {
                    let ar = &ab[i * p..(i + 1) * p];
                    for (j, o) in row.iter_mut().enumerate() {
                        let br = &bb[j * p..(j + 1) * p];
                        let mut s = 0.0;
                        for (x, y) in ar.iter().zip(br) {
                            s += x * y;
                        }
                        *o = s;
                    }
                }
            } else {
                gemm_acc(block, ab, bb, p, n);
            }
        };
        if out.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(bi, blk)| kernel(bi, blk));
        } else {
            out.chunks_mut(m * n)
                .enumerate()
                .for_each(|(bi, blk)| kernel(bi, blk));
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.new_node(
            shape,
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                transpose_b,
            },
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.val(x);
        let width = t.last_dim();
        if len == 0 || start + len > width {
            return Err(shape_err("slice_last", t.shape(), &[start, len]));
        }
        let out = t
            .values()
            .chunks(width)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.new_node(
            shape,
            out,
            Op::SliceLast {
                x,
                start,
                len,
                width,
            },
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_last of zero tensors".into()))?;
        let lead = {
            let s = self.val(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", self.val(*first).shape(), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.new_node(
            shape,
            out,
            Op::ConcatLast {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Prepends `row` (shape `[d]`) to every sequence of `x` (shape `[.., n, d]`).
    pub fn prepend_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.val(x).shape(), self.val(row).shape());
        let r = sx.len();
        if r < 2 || sr != [sx[r - 1]] {
            return Err(shape_err("prepend_row", sx, sr));
        }
        let (n, d) = (sx[r - 2], sx[r - 1]);
        let batch: usize = sx[..r - 2].iter().product();
        let xv = self.val(x).values();
        let rv = self.val(row).values();
        let mut out = Vec::with_capacity(batch * (n + 1) * d);
        for bi in 0..batch {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[bi * n * d..(bi + 1) * n * d]);
        }
        let mut shape = sx.to_vec();
        shape[r - 2] = n + 1;
        Ok(self.new_node(
            shape,
            out,
            Op::PrependRow {
                x,
                row,
                batch,
                n,
                d,
            },
        ))
    }

    /// Row `index` of every sequence: `[.., n, d]` to `[.., d]`.
    pub fn select_row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let sx = self.val(x).shape();
        let r = sx.len();
        if r < 2 || index >= sx[r - 2] {
            return Err(shape_err("select_row", sx, &[index]));
        }
        let (n, d) = (sx[r - 2], sx[r - 1]);
        let batch: usize = sx[..r - 2].iter().product();
        let xv = self.val(x).values();
        let out = (0..batch)
            .flat_map(|bi| xv[(bi * n + index) * d..(bi * n + index + 1) * d].iter().copied())
            .collect();
        let mut shape = sx[..r - 2].to_vec();
        shape.push(d);
        Ok(self.new_node(
            shape,
            out,
            Op::SelectRow {
                x,
                index,
                batch,
                n,
                d,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let t = self.val(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(shape_err("reshape", t.shape(), &shape));
        }
        let out = t.values().to_vec();
        Ok(self.new_node(shape, out, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).values().iter().sum();
        self.new_node(Vec::new(), vec![s], Op::Sum { x })
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse_loss", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let mean = s / ta.len() as f64;
        Ok(self.new_node(Vec::new(), vec![mean], Op::MseLoss { a, b }))
    }

    /// Back-propagates from a scalar `loss`, adding dLoss/dLeaf into the
    /// gradient slot of every leaf that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let slot = &mut self.nodes[id].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.values();
        let mut acc = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(target) {
                return;
            }
            let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.val(target).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, p, n } => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                acc(*a, &mut |ga| gemm_nt_acc(ga, g, bv, *p, *n));
                acc(*b, &mut |gb| gemm_tn_acc(gb, av, g, *m, *p, *n));
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out: od,
            } => {
                let (xv, wv) = (self.val(*x).values(), self.val(*w).values());
                acc(*x, &mut |gx| gemm_nt_acc(gx, g, wv, *inp, *od));
                acc(*w, &mut |gw| gemm_tn_acc(gw, xv, g, *rows, *inp, *od));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(*od) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    acc(t, &mut |gt| gt.iter_mut().zip(g).for_each(|(a, v)| *a += v));
                }
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(a, v)| *a += v));
                let blen = self.val(*b).len();
                acc(*b, &mut |gb| {
                    for chunk in g.chunks(blen) {
                        gb.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v * factor));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x).values();
                acc(*x, &mut |gx| {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += if v >= 0.0 { *gv } else { slope * gv };
                    }
                });
            }
            Op::Sigmoid { x } => {
                acc(*x, &mut |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::SoftmaxRows { x, cols } => {
                acc(*x, &mut |gx| {
                    fill_rows(gx, *cols, |i, row| {
                        let yr = &out[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), gv) in row.iter_mut().zip(yr).zip(gr) {
                            *o += y * (gv - dot);
                        }
                    })
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain).values();
                let d = *d;
                acc(*x, &mut |gx| {
                    for (((o, gr), hr), s) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(inv_std)
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for ((gi, hi), wi) in gr.iter().zip(hr).zip(gv) {
                            let dh = gi * wi;
                            mean_dh += dh;
                            mean_dh_h += dh * hi;
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for (((oi, gi), hi), wi) in o.iter_mut().zip(gr).zip(hr).zip(gv) {
                            *oi += s * (gi * wi - mean_dh - hi * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                p,
                n,
                transpose_b,
            } => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                let (m, p, n) = (*m, *p, *n);
                let _ = batch;
                acc(*a, &mut |ga| {
                    fill_rows(ga, m * p, |bi, blk| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * p * n..(bi + 1) * p * n];
                        if *transpose_b {
                            // b block is [n, p]
                            gemm_acc(blk, gb, bb, n, p);
                        } else {
                            gemm_nt_acc(blk, gb, bb, p, n);
                        }
                    })
                });
                acc(*b, &mut |gbt| {
                    fill_rows(gbt, p * n, |bi, blk| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * p..(bi + 1) * m * p];
                        if *transpose_b {
                            // d b[n, p] = gᵀ[n, m] · a[m, p]
                            gemm_tn_acc(blk, gb, ab, m, n, p);
                        } else {
                            gemm_tn_acc(blk, ab, gb, m, p, n);
                        }
                    })
                });
            }
            Op::SliceLast {
                x,
                start,
                len,
                width,
            } => {
                acc(*x, &mut |gx| {
                    for (o, gr) in gx.chunks_mut(*width).zip(g.chunks(*len)) {
                        o[*start..*start + *len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::ConcatLast { parts, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |gp| {
                        for (o, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            o.iter_mut()
                                .zip(&gr[offset..offset + w])
                                .for_each(|(a, v)| *a += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::PrependRow {
                x,
                row,
                batch,
                n,
                d,
            } => {
                let (n, d) = (*n, *d);
                acc(*x, &mut |gx| {
                    for bi in 0..*batch {
                        let src = &g[(bi * (n + 1) + 1) * d..(bi + 1) * (n + 1) * d];
                        gx[bi * n * d..(bi + 1) * n * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, v)| *a += v);
                    }
                });
                acc(*row, &mut |gr| {
                    for bi in 0..*batch {
                        let src = &g[bi * (n + 1) * d..(bi * (n + 1) + 1) * d];
                        gr.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::SelectRow {
                x,
                index,
                batch,
                n,
                d,
            } => {
                acc(*x, &mut |gx| {
                    for bi in 0..*batch {
                        let base = (bi * n + index) * d;
                        gx[base..base + d]
                            .iter_mut()
                            .zip(&g[bi * d..(bi + 1) * d])
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Reshape { x } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v));
            }
            Op::Sum { x } => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::MseLoss { a, b } => {
                let (av, bv) = (self.val(*a).values(), self.val(*b).values());
                let k = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += k * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= k * (x - y);
                    }
                });
            }
        }
    }
}
