//! Tape-based reverse-mode automatic differentiation over dense f32 tensors.
//!
//! Ops compute eagerly and record a tape node only when at least one input is
//! attached to the tape (a registered leaf or something derived from one), so
//! the same forward code serves training and inference. Backward walks the
//! tape in strictly decreasing append order; a node's gradient is fully
//! accumulated before its own rule runs, which handles fan-out for free.
//!
//! Single-threaded by contract while a tape is live. Tensors without tape
//! linkage are immutable values and safe to share across threads; independent
//! graphs may run in parallel as long as each holds its own tape.

pub mod adam;
pub mod check;
pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use adam::AdamState;
pub use check::{grad_check, GradCheckReport};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major f32 tensor, optionally linked to a tape node.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    id: usize,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidOp {
                op: "tensor",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: Arc::new(vec![0.0; n]), node: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    /// Standard-normal samples in the given shape.
    pub fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n = numel(&shape);
        let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad_enabled(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_ref(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Detach from any tape, keeping the value.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Mutable access to the underlying buffer; copies only if shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Op kinds recorded on the tape. Saved forward state rides along where the
/// backward rule needs it.
#[derive(Debug)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    /// inputs [x, b]; b added to every row of the last axis
    BiasAdd,
    Matmul,
    Reshape,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Softmax,
    LayerNorm { mean: Vec<f32>, inv_std: Vec<f32> },
    Gelu,
    Embedding { ids: Vec<u16> },
    Mean,
    Sum,
    Mse,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::BiasAdd => "bias_add",
            Op::Matmul => "matmul",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Mse => "mse",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) out_shape: Vec<usize>,
    pub(crate) out_data: Arc<Vec<f32>>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Append-only record of a forward computation.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a grad-enabled leaf holding a copy-on-write view of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        let out = Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef { tape: self.id, id }),
        };
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape.clone(),
            out_data: Arc::clone(&t.data),
        });
        out
    }

    fn check_linkage(&self, op: &'static str, inputs: &[&Tensor]) -> Result<bool> {
        let mut any = false;
        for t in inputs {
            if let Some(nref) = t.node {
                if nref.tape != self.id {
                    return Err(Error::InvalidOp {
                        op,
                        msg: "input belongs to a different tape".into(),
                    });
                }
                any = true;
            }
        }
        Ok(any)
    }

    fn emit(
        &mut self,
        op: Op,
        record: bool,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Tensor {
        let data = Arc::new(data);
        if !record {
            return Tensor { shape, data, node: None };
        }
        let id = self.nodes.len();
        let out = Tensor {
            shape: shape.clone(),
            data: Arc::clone(&data),
            node: Some(NodeRef { tape: self.id, id }),
        };
        self.nodes.push(Node { op, inputs, out_shape: shape, out_data: data });
        out
    }

    fn binary_same_shape(&mut self, op: Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: op.name(), lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let record = self.check_linkage(op.name(), &[a, b])?;
        let data = match op {
            Op::Add => a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect(),
            Op::Sub => a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect(),
            Op::Mul => a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        Ok(self.emit(op, record, vec![a.clone(), b.clone()], a.shape.clone(), data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn scale(&mut self, a: &Tensor, s: f32) -> Result<Tensor> {
        let record = self.check_linkage("scale", &[a])?;
        let data = a.data.iter().map(|x| x * s).collect();
        Ok(self.emit(Op::Scale(s), record, vec![a.clone()], a.shape.clone(), data))
    }

    /// Add a rank-1 bias over the last axis of `a`.
    pub fn bias_add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let cols = *a.shape.last().unwrap_or(&0);
        if b.shape.len() != 1 || b.shape[0] != cols {
            return Err(Error::ShapeMismatch { op: "bias_add", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let record = self.check_linkage("bias_add", &[a, b])?;
        let mut data = a.data.as_ref().clone();
        for row in data.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.data.iter()) {
                *v += bv;
            }
        }
        Ok(self.emit(Op::BiasAdd, record, vec![a.clone(), b.clone()], a.shape.clone(), data))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let record = self.check_linkage("matmul", &[a, b])?;
        let data = kernels::matmul(&a.data, &b.data, m, k, n);
        Ok(self.emit(Op::Matmul, record, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != a.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: a.shape.clone(), rhs: shape });
        }
        let record = self.check_linkage("reshape", &[a])?;
        let data = a.data.as_ref().clone();
        Ok(self.emit(Op::Reshape, record, vec![a.clone()], shape, data))
    }

    /// Transpose a rank-2 tensor.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(Error::InvalidOp { op: "transpose", msg: format!("expected rank 2, got {:?}", a.shape) });
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        let record = self.check_linkage("transpose", &[a])?;
        let data = kernels::transpose2d(&a.data, r, c);
        Ok(self.emit(Op::Transpose, record, vec![a.clone()], vec![c, r], data))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidOp { op: "concat", msg: "no inputs".into() });
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidOp { op: "concat", msg: format!("axis {axis} out of rank {rank}") });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::ShapeMismatch { op: "concat", lhs: parts[0].shape.clone(), rhs: p.shape.clone() });
            }
            for (d, (&x, &y)) in parts[0].shape.iter().zip(p.shape.iter()).enumerate() {
                if d != axis && x != y {
                    return Err(Error::ShapeMismatch { op: "concat", lhs: parts[0].shape.clone(), rhs: p.shape.clone() });
                }
            }
            axis_total += p.shape[axis];
        }
        let mut shape = parts[0].shape.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel(&shape)];
        let mut offset = 0;
        for p in parts {
            let l = p.shape[axis];
            for o in 0..outer {
                let src = &p.data[o * l * inner..(o + 1) * l * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + l * inner].copy_from_slice(src);
            }
            offset += l;
        }
        let tensors: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let record = self.check_linkage("concat", &refs)?;
        Ok(self.emit(Op::Concat { axis }, record, tensors, shape, data))
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = a.shape.len();
        if axis >= rank || start + len > a.shape[axis] {
            return Err(Error::InvalidOp {
                op: "slice",
                msg: format!("range {start}..{} out of axis {axis} of {:?}", start + len, a.shape),
            });
        }
        let record = self.check_linkage("slice", &[a])?;
        let outer: usize = a.shape[..axis].iter().product();
        let inner: usize = a.shape[axis + 1..].iter().product();
        let l_in = a.shape[axis];
        let mut shape = a.shape.clone();
        shape[axis] = len;
        let mut data = vec![0.0f32; numel(&shape)];
        for o in 0..outer {
            let src = &a.data[(o * l_in + start) * inner..(o * l_in + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.emit(Op::Slice { axis, start, len }, record, vec![a.clone()], shape, data))
    }

    /// Softmax over the last axis, guarded by max subtraction.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.shape.is_empty() {
            return Err(Error::InvalidOp { op: "softmax", msg: "scalar input".into() });
        }
        let cols = *a.shape.last().unwrap();
        let rows = a.data.len() / cols;
        let record = self.check_linkage("softmax", &[a])?;
        let data = kernels::softmax_rows(&a.data, rows, cols);
        Ok(self.emit(Op::Softmax, record, vec![a.clone()], a.shape.clone(), data))
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if a.shape.is_empty() {
            return Err(Error::InvalidOp { op: "layer_norm", msg: "scalar input".into() });
        }
        let cols = *a.shape.last().unwrap();
        if gain.shape != [cols] || bias.shape != [cols] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: a.shape.clone(), rhs: gain.shape.clone() });
        }
        let rows = a.data.len() / cols;
        let record = self.check_linkage("layer_norm", &[a, gain, bias])?;
        let (data, mean, inv_std) = kernels::layer_norm_rows(&a.data, &gain.data, &bias.data, rows, cols);
        Ok(self.emit(
            Op::LayerNorm { mean, inv_std },
            record,
            vec![a.clone(), gain.clone(), bias.clone()],
            a.shape.clone(),
            data,
        ))
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let record = self.check_linkage("gelu", &[a])?;
        let data = a.data.iter().map(|&x| kernels::gelu(x)).collect();
        Ok(self.emit(Op::Gelu, record, vec![a.clone()], a.shape.clone(), data))
    }

    /// Look up rows of a (vocab, dim) table.
    pub fn embedding(&mut self, table: &Tensor, ids: &[u16]) -> Result<Tensor> {
        if table.shape.len() != 2 {
            return Err(Error::InvalidOp { op: "embedding", msg: format!("table must be rank 2, got {:?}", table.shape) });
        }
        let (vocab, dim) = (table.shape[0], table.shape[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
        }
        let record = self.check_linkage("embedding", &[table])?;
        let mut data = vec![0.0f32; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            data[i * dim..(i + 1) * dim].copy_from_slice(&table.data[id as usize * dim..(id as usize + 1) * dim]);
        }
        Ok(self.emit(
            Op::Embedding { ids: ids.to_vec() },
            record,
            vec![table.clone()],
            vec![ids.len(), dim],
            data,
        ))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let record = self.check_linkage("mean", &[a])?;
        let n = a.data.len().max(1) as f32;
        let v = a.data.iter().sum::<f32>() / n;
        Ok(self.emit(Op::Mean, record, vec![a.clone()], vec![], vec![v]))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let record = self.check_linkage("sum", &[a])?;
        let v = a.data.iter().sum::<f32>();
        Ok(self.emit(Op::Sum, record, vec![a.clone()], vec![], vec![v]))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: "mse", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let record = self.check_linkage("mse", &[a, b])?;
        let n = a.data.len().max(1) as f32;
        let v = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum::<f32>()
            / n;
        Ok(self.emit(Op::Mse, record, vec![a.clone(), b.clone()], vec![], vec![v]))
    }

    /// Reverse pass from a scalar loss. Consumes the tape; gradients are
    /// returned for every node, with non-leaf buffers dropped as soon as they
    /// have been propagated.
    pub fn backward(mut self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::InvalidOp { op: "backward", msg: format!("loss must be scalar, got {:?}", loss.shape) });
        }
        let node = loss.node.ok_or_else(|| Error::InvalidOp {
            op: "backward",
            msg: "loss is not attached to this tape".into(),
        })?;
        if node.tape != self.id || self.nodes.is_empty() {
            return Err(Error::InvalidOp { op: "backward", msg: "loss is not attached to this tape".into() });
        }
        if self.consumed {
            return Err(Error::InvalidOp { op: "backward", msg: "tape already consumed".into() });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.id] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut input_grads = backward_rule(node, &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads.drain(..)) {
                let (Some(nref), Some(ig)) = (inp.node, ig) else { continue };
                match &mut grads[nref.id] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(ig.iter()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }

        Ok(Gradients { tape: self.id, grads })
    }
}

/// Per-input gradients for one node. `None` for inputs that need no gradient.
fn backward_rule(node: &Node, g: &[f32]) -> Vec<Option<Vec<f32>>> {
    let want: Vec<bool> = node.inputs.iter().map(|t| t.node.is_some()).collect();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            want[0].then(|| g.to_vec()),
            want[1].then(|| g.to_vec()),
        ],
        Op::Sub => vec![
            want[0].then(|| g.to_vec()),
            want[1].then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            vec![
                want[0].then(|| g.iter().zip(b.data.iter()).map(|(gv, bv)| gv * bv).collect()),
                want[1].then(|| g.iter().zip(a.data.iter()).map(|(gv, av)| gv * av).collect()),
            ]
        }
        Op::Scale(s) => vec![want[0].then(|| g.iter().map(|v| v * s).collect())],
        Op::BiasAdd => {
            let cols = *node.out_shape.last().unwrap();
            let db = want[1].then(|| {
                let mut db = vec![0.0f32; cols];
                for row in g.chunks(cols) {
                    for (d, &gv) in db.iter_mut().zip(row.iter()) {
                        *d += gv;
                    }
                }
                db
            });
            vec![want[0].then(|| g.to_vec()), db]
        }
        Op::Matmul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            let da = want[0].then(|| {
                let bt = kernels::transpose2d(&b.data, k, n);
                kernels::matmul(g, &bt, m, n, k)
            });
            let db = want[1].then(|| {
                let mut db = vec![0.0f32; k * n];
                kernels::matmul_tn_acc(&a.data, g, &mut db, m, k, n);
                db
            });
            vec![da, db]
        }
        Op::Reshape => vec![want[0].then(|| g.to_vec())],
        Op::Transpose => {
            let (r, c) = (node.out_shape[0], node.out_shape[1]);
            vec![want[0].then(|| kernels::transpose2d(g, r, c))]
        }
        Op::Concat { axis } => {
            let shape = &node.out_shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let axis_total = shape[*axis];
            let mut out = Vec::with_capacity(node.inputs.len());
            let mut offset = 0;
            for (idx, inp) in node.inputs.iter().enumerate() {
                let l = inp.shape[*axis];
                out.push(want[idx].then(|| {
                    let mut ig = Vec::with_capacity(inp.data.len());
                    for o in 0..outer {
                        let src_start = o * axis_total * inner + offset * inner;
                        ig.extend_from_slice(&g[src_start..src_start + l * inner]);
                    }
                    ig
                }));
                offset += l;
            }
            out
        }
        Op::Slice { axis, start, len } => {
            let inp = &node.inputs[0];
            let outer: usize = inp.shape[..*axis].iter().product();
            let inner: usize = inp.shape[*axis + 1..].iter().product();
            let l_in = inp.shape[*axis];
            vec![want[0].then(|| {
                // Build row by row: leading zeros, the slice's gradient
                // stripe, trailing zeros. Touches each element once.
                let mut ig = Vec::with_capacity(inp.data.len());
                for o in 0..outer {
                    ig.resize(ig.len() + start * inner, 0.0);
                    ig.extend_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    ig.resize(ig.len() + (l_in - start - len) * inner, 0.0);
                }
                ig
            })]
        }
        Op::Softmax => {
            let y = &node.out_data;
            let cols = *node.out_shape.last().unwrap();
            vec![want[0].then(|| {
                let mut ig = vec![0.0f32; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s: f32 = yr.iter().zip(gr.iter()).map(|(yv, gv)| yv * gv).sum();
                    for ((iv, &yv), &gv) in ig[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *iv = yv * (gv - s);
                    }
                }
                ig
            })]
        }
        Op::LayerNorm { mean, inv_std } => {
            let x = &node.inputs[0];
            let gain = &node.inputs[1];
            let cols = *node.out_shape.last().unwrap();
            let rows = x.data.len() / cols;
            let dx = want[0].then(|| {
                let mut ig = vec![0.0f32; x.data.len()];
                for r in 0..rows {
                    let xr = &x.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for j in 0..cols {
                        let gy = gr[j] * gain.data[j];
                        let xh = (xr[j] - mu) * is;
                        m1 += gy;
                        m2 += gy * xh;
                    }
                    m1 /= cols as f32;
                    m2 /= cols as f32;
                    for j in 0..cols {
                        let gy = gr[j] * gain.data[j];
                        let xh = (xr[j] - mu) * is;
                        ig[r * cols + j] = is * (gy - m1 - xh * m2);
                    }
                }
                ig
            });
            let dgain = want[1].then(|| {
                let mut dg = vec![0.0f32; cols];
                for r in 0..rows {
                    let xr = &x.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dg[j] += gr[j] * (xr[j] - mean[r]) * inv_std[r];
                    }
                }
                dg
            });
            let dbias = want[2].then(|| {
                let mut db = vec![0.0f32; cols];
                for r in 0..rows {
                    for (d, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += gv;
                    }
                }
                db
            });
            vec![dx, dgain, dbias]
        }
        Op::Gelu => {
            let x = &node.inputs[0];
            vec![want[0].then(|| {
                g.iter().zip(x.data.iter()).map(|(&gv, &xv)| gv * kernels::gelu_deriv(xv)).collect()
            })]
        }
        Op::Embedding { ids } => {
            let table = &node.inputs[0];
            let dim = table.shape[1];
            vec![want[0].then(|| {
                let mut dt = vec![0.0f32; table.data.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                    for (d, &gv) in dst.iter_mut().zip(&g[i * dim..(i + 1) * dim]) {
                        *d += gv;
                    }
                }
                dt
            })]
        }
        Op::Mean => {
            let n = node.inputs[0].data.len().max(1) as f32;
            let gv = g[0] / n;
            vec![want[0].then(|| vec![gv; node.inputs[0].data.len()])]
        }
        Op::Sum => {
            let gv = g[0];
            vec![want[0].then(|| vec![gv; node.inputs[0].data.len()])]
        }
        Op::Mse => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let n = a.data.len().max(1) as f32;
            let c = 2.0 * g[0] / n;
            let da = want[0].then(|| {
                a.data.iter().zip(b.data.iter()).map(|(x, y)| c * (x - y)).collect()
            });
            let db = want[1].then(|| {
                a.data.iter().zip(b.data.iter()).map(|(x, y)| -c * (x - y)).collect()
            });
            vec![da, db]
        }
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        let nref = t.node?;
        if nref.tape != self.tape {
            return None;
        }
        self.grads.get(nref.id)?.as_deref()
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f32>> {
        let nref = t.node?;
        if nref.tape != self.tape {
            return None;
        }
        self.grads.get_mut(nref.id)?.take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]);
        let y = tape.matmul(&eye, &a).unwrap();
        assert_eq!(y.data(), a.data());
        assert!(tape.is_empty());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn grad_of_mse_against_zero() {
        let a = 1.75f32;
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[a]));
        let zero = t(&[1], &[0.0]);
        let loss = tape.mse(&x, &zero).unwrap();
        assert_eq!(loss.scalar_value(), a * a);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0 * a]);
    }

    #[test]
    fn fanout_accumulates_like_scaling() {
        // y = x + x must grade like y = 2x.
        let x0 = t(&[3], &[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g1 = tape.backward(&loss).unwrap().get(&x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let y = tape.scale(&x, 2.0).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g2 = tape.backward(&loss).unwrap().get(&x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.add(&x, &x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::new();
        let c = Tensor::scalar(1.0);
        assert!(tape.backward(&c).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_nonnegative() {
        let mut tape = Tape::new();
        let mut rng = crate::rng::rng_for(11, 0, 0);
        let x = Tensor::randn(vec![7, 5], &mut rng);
        let y = tape.softmax(&x).unwrap();
        for row in y.data().chunks(5) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_all_zeros() {
        let mut tape = Tape::new();
        let gain = t(&[6], &[1.0; 6]);
        let bias = t(&[6], &[0.0; 6]);
        // 4.5 sums and averages exactly in f32, so the output is exactly zero.
        let x = t(&[6], &[4.5; 6]);
        let y = tape.layer_norm(&x, &gain, &bias).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
        // A constant that rounds (4.2) must still be finite and tiny: the eps
        // guard caps the inverse std at 1/sqrt(eps), so mean rounding cannot
        // blow up into NaN or large values.
        let x = t(&[6], &[4.2; 6]);
        let y = tape.layer_norm(&x, &gain, &bias).unwrap();
        for &v in y.data() {
            assert!(v.is_finite());
            assert!(v.abs() < 1e-3, "residual {v}");
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = tape.slice(&c, 1, 2, 3).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let table = t(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            tape.embedding(&table, &[3]),
            Err(Error::OutOfVocab { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn identical_graphs_produce_bit_identical_gradients() {
        let run = || {
            let mut rng = crate::rng::rng_for(99, 1, 2);
            let x0 = Tensor::randn(vec![4, 4], &mut rng);
            let w0 = Tensor::randn(vec![4, 4], &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let w = tape.leaf(&w0);
            let h = tape.matmul(&x, &w).unwrap();
            let s = tape.softmax(&h).unwrap();
            let loss = tape.mean(&s).unwrap();
            let mut grads = tape.backward(&loss).unwrap();
            (grads.take(&x).unwrap(), grads.take(&w).unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
