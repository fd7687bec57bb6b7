//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs were
//! appended earlier, so reverse insertion order is a valid topological order
//! for the backward sweep. Every forward value and every backward gradient is
//! checked for finiteness.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    MeanRows(NodeId),
    TileRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Bce {
        p: NodeId,
        targets: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::TileRows(..) => "tile_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn raw(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let value = as_matrix(value);
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite leaf value".into()));
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Result<NodeId> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced non-finite value {} at flat index {bad}",
                op.name(),
                data[bad]
            )));
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::MeanRows(a)
            | Op::TileRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::SliceCols { x, .. } => vec![*x],
            Op::Bce { p, .. } => vec![*p],
        }
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa)
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        let d = self.zip_map(a, b, |x, y| x + y);
        self.push(r, c, d, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let d = self.zip_map(a, b, |x, y| x - y);
        self.push(r, c, d, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let d = self.zip_map(a, b, |x, y| x * y);
        self.push(r, c, d, Op::Mul(a, b))
    }

    /// `a[m×n] + row[1×n]`, broadcasting the row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Dimension(format!(
                "add_row: {:?} cannot broadcast onto {:?}",
                self.shape(row),
                (r, c)
            )));
        }
        let rv = self.value(row).data().to_vec();
        let d = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&rv).map(|(x, y)| x + y))
            .collect();
        self.push(r, c, d, Op::AddRow(a, row))
    }

    /// `a[m×n] ⊙ col[m×1]`, broadcasting the column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::Dimension(format!(
                "mul_col: {:?} cannot broadcast onto {:?}",
                self.shape(col),
                (r, c)
            )));
        }
        let cv = self.value(col).data().to_vec();
        let d = self
            .value(a)
            .data()
            .chunks(c)
            .zip(&cv)
            .flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s))
            .collect();
        self.push(r, c, d, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let d = self.map(a, |x| x * s);
        self.push(r, c, d, Op::Scale(a, s))
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, a: NodeId, k: &Tensor) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if (k.rows(), k.cols()) != (r, c) {
            return Err(Error::Dimension(format!(
                "add_const: constant {:?} vs {:?}",
                k.shape(),
                (r, c)
            )));
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(k.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, d, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: [{m}×{k}] by [{k2}×{n}], inner dimensions differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: [{m}×{k}] by [{n}×{k2}]ᵀ, inner dimensions differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, d, Op::Transpose(a))
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let mut d = self.value(a).data().to_vec();
        for row in d.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, d, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1×n]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [1×{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for (i, row) in self.value(x).data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let d = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(r, c, d, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let d = self.map(a, f64::tanh);
        self.push(r, c, d, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let d = self.map(a, sigmoid);
        self.push(r, c, d, Op::Sigmoid(a))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Validation("gather: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Validation(format!(
                "gather: id {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table).data();
        let d: Vec<f64> = ids
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(
            ids.len(),
            c,
            d,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Validation("concat_rows: nothing to concatenate".into()))?;
        let mut d = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: width {pc} does not match {c}"
                )));
            }
            r += pr;
            d.extend_from_slice(self.value(p).data());
        }
        self.push(r, c, d, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Validation("concat_cols: nothing to concatenate".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row count {pr} does not match {r}"
                )));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                d.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(r, c, d, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) outside width {c}",
                start + len
            )));
        }
        let d = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(r, len, d, Op::SliceCols { x, start })
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let mut d = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, v) in d.iter_mut().zip(row) {
                *o += v;
            }
        }
        d.iter_mut().for_each(|v| *v /= r as f64);
        self.push(1, c, d, Op::MeanRows(a))
    }

    /// `[1×n] → [times×n]`.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 || times == 0 {
            return Err(Error::Dimension(format!(
                "tile_rows: needs a single row and a positive count, got {r} rows × {times}"
            )));
        }
        let row = self.value(a).data().to_vec();
        let d = (0..times).flat_map(|_| row.iter().copied()).collect();
        self.push(times, c, d, Op::TileRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Mean binary cross-entropy of probabilities against {0,1} targets,
    /// probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: NodeId, targets: &[f64], eps: f64) -> Result<NodeId> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce: {} probabilities vs {} targets",
                pv.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!("bce: target {t} is not 0 or 1")));
        }
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            1,
            1,
            vec![loss],
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively across fan-out.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if let Some(bad) = gout.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} at node {idx} ({})",
                    self.nodes[idx].op.name()
                )));
            }
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.value.rows(), node.value.cols());
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let len = self.nodes[id.0].value.len();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::AddConst(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for grow in g.chunks(c) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i * c + j] * cv[i];
                        }
                    }
                });
                acc(*col, &mut |s| {
                    for i in 0..r {
                        s[i] += (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                let (av, bv) = (val(*a), val(*b));
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |s| kernels::matmul_nt(g, bv, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn(av, g, s, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = self.shape(*a);
                let n = c;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| kernels::matmul(g, bv, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn(g, av, s, m, n, k));
            }
            Op::Transpose(a) => acc(*a, &mut |s| {
                // node is [r×c]; input is [c×r]
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            }),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            s[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                acc(*x, &mut |s| {
                    let nf = c as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g[i * c + j] * gv[j];
                            s[i * c + j] +=
                                rstd[i] / nf * (nf * dh - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks(c) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let x = av[i];
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        s[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gather { table, ids } => acc(*table, &mut |s| {
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut s[id * c..(id + 1) * c], &g[row * c..(row + 1) * c]);
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(p, &mut |s| {
                        for i in 0..r {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * c + col0..i * c + col0 + w]);
                        }
                    });
                    col0 += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = self.nodes[x.0].value.cols();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        add_into(&mut s[i * w + start..i * w + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[a.0].value.rows();
                acc(*a, &mut |s| {
                    for srow in s.chunks_mut(c) {
                        for (x, y) in srow.iter_mut().zip(g) {
                            *x += y / rows as f64;
                        }
                    }
                });
            }
            Op::TileRows(a) => acc(*a, &mut |s| {
                for grow in g.chunks(c) {
                    add_into(s, grow);
                }
            }),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Bce { p, targets, eps } => {
                let pv = val(*p);
                let n = pv.len() as f64;
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        let (pi, t) = (pv[i], targets[i]);
                        if pi <= *eps || pi >= 1.0 - eps {
                            continue;
                        }
                        s[i] += g[0] * (-(t / pi) + (1.0 - t) / (1.0 - pi)) / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        Tensor::matrix(r, c, t.into_data()).expect("same element count")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place stabilized softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
