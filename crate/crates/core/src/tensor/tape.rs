use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use std::borrow::Cow;
use std::cell::RefCell;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Sqrt(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SegmentMean(usize, Vec<usize>),
    SegmentMax(usize, Vec<usize>),
    SoftmaxRows(usize),
    NormalizeRows(usize),
    StandardizeRows(usize),
    Gather(usize, Vec<usize>),
    Concat(Vec<usize>),
    Reshape(usize),
    Min(usize, usize),
    Max(usize, usize),
    Paste {
        base: usize,
        block: usize,
        origin: (usize, usize),
    },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    data: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    /// Per-row norms for `NormalizeRows`, per-row deviations for `StandardizeRows`.
    saved: Vec<f64>,
}

/// Ordered record of primitive operations.
///
/// Node indices increase in creation order and every op refers only to
/// earlier nodes, so reverse index order is a valid topological replay.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'a> {
    tape: &'a Tape<'a>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(self.shapes[id].clone(), g.clone()).expect("grad shape"))
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols, cols)
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&'a self, shape: Vec<usize>, data: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var<'a> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            saved: Vec::new(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a borrowed tensor; it participates in gradients iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&'a self, tensor: &'a Tensor) -> Var<'a> {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&'a self, tensor: Tensor) -> Var<'a> {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, false)
    }

    pub fn param(&'a self, tensor: Tensor) -> Var<'a> {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, true)
    }

    pub fn scalar(&'a self, value: f64) -> Var<'a> {
        self.constant(Tensor::scalar(value))
    }

    /// Stacks rank-1 or rank-2 values along the first axis.
    pub fn concat(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let cols = rows_cols(&nodes[parts[0].id].shape).1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let node = &nodes[p.id];
            if node.shape.len() > 2 || rows_cols(&node.shape).1 != cols {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: nodes[parts[0].id].shape.clone(),
                    rhs: node.shape.clone(),
                });
            }
            rows += rows_cols(&node.shape).0;
            data.extend_from_slice(&node.data);
            rg |= node.requires_grad;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(vec![rows, cols], Cow::Owned(data), Op::Concat(ids), rg))
    }

    /// Reverse pass from a scalar loss. Clears the tape afterwards, so every
    /// `Var` recorded so far becomes invalid.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        if loss.id >= n {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        nodes.clear();
        Ok(Gradients { grads, shapes })
    }
}

fn segment_argmax(d: &[f64], cols: usize, start: usize, len: usize, j: usize) -> usize {
    let mut best = start;
    for r in start + 1..start + len {
        if d[r * cols + j] > d[best * cols + j] {
            best = r;
        }
    }
    best
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    f(slot);
}

fn propagate(nodes: &[Node<'_>], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        &Op::Sub(a, b) => {
            acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        &Op::Mul(a, b) => {
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * db[i];
                }
            });
            acc(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * da[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / db[i];
                }
            });
            acc(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * da[i] / (db[i] * db[i]);
                }
            });
        }
        &Op::MulScalar(a, sc) => {
            let (da, ds) = (&nodes[a].data, nodes[sc].data[0]);
            acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += ds * y));
            acc(grads, nodes, sc, |s| s[0] += dot(g, da));
        }
        &Op::Scale(a, c) => acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y))
        }
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            acc(grads, nodes, a, |s| matmul_nt_acc(g, db, s, m, k, n));
            acc(grads, nodes, b, |s| matmul_tn_acc(da, g, s, m, k, n));
        }
        &Op::Transpose(a) => {
            let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
            acc(grads, nodes, a, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        &Op::AddRow(a, b) => {
            let cols = nodes[b].data.len();
            acc(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, b, |s| {
                for row in g.chunks(cols) {
                    s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        &Op::Relu(a) => {
            let da = &nodes[a].data;
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if da[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Tanh(a) => acc(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }),
        &Op::Exp(a) => acc(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * out[i];
            }
        }),
        &Op::Sqrt(a) => acc(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * 0.5 / out[i];
            }
        }),
        &Op::Log(a) => {
            let da = &nodes[a].data;
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / da[i];
                }
            });
        }
        &Op::Sum(a) => acc(grads, nodes, a, |s| s.iter_mut().for_each(|x| *x += g[0])),
        &Op::Mean(a) => {
            let n = nodes[a].data.len() as f64;
            acc(grads, nodes, a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::SegmentMean(a, lengths) => {
            let cols = rows_cols(&nodes[*a].shape).1;
            acc(grads, nodes, *a, |s| {
                let mut row = 0;
                for (seg, &len) in lengths.iter().enumerate() {
                    let gs = &g[seg * cols..(seg + 1) * cols];
                    for r in row..row + len {
                        for (x, y) in s[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                            *x += y / len as f64;
                        }
                    }
                    row += len;
                }
            });
        }
        Op::SegmentMax(a, lengths) => {
            let cols = rows_cols(&nodes[*a].shape).1;
            let da = &nodes[*a].data;
            acc(grads, nodes, *a, |s| {
                let mut start = 0;
                for (seg, &len) in lengths.iter().enumerate() {
                    for j in 0..cols {
                        let best = segment_argmax(da, cols, start, len, j);
                        s[best * cols + j] += g[seg * cols + j];
                    }
                    start += len;
                }
            });
        }
        &Op::SoftmaxRows(a) => {
            let cols = rows_cols(&node.shape).1;
            acc(grads, nodes, a, |s| {
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let inner = dot(grow, yrow);
                    for j in 0..cols {
                        srow[j] += yrow[j] * (grow[j] - inner);
                    }
                }
            });
        }
        &Op::NormalizeRows(a) => {
            let cols = rows_cols(&node.shape).1;
            let norms = &node.saved;
            acc(grads, nodes, a, |s| {
                for (r, ((srow, grow), yrow)) in s
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.chunks(cols))
                    .enumerate()
                {
                    let inner = dot(grow, yrow);
                    for j in 0..cols {
                        srow[j] += (grow[j] - yrow[j] * inner) / norms[r];
                    }
                }
            });
        }
        &Op::StandardizeRows(a) => {
            let cols = rows_cols(&node.shape).1;
            let sigmas = &node.saved;
            let n = cols as f64;
            acc(grads, nodes, a, |s| {
                for (r, ((srow, grow), zrow)) in s
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.chunks(cols))
                    .enumerate()
                {
                    let g_mean = grow.iter().sum::<f64>() / n;
                    let gz_mean = dot(grow, zrow) / n;
                    for j in 0..cols {
                        srow[j] += (grow[j] - g_mean - zrow[j] * gz_mean) / sigmas[r];
                    }
                }
            });
        }
        Op::Gather(a, idx) => acc(grads, nodes, *a, |s| {
            for (o, &i) in idx.iter().enumerate() {
                s[i] += g[o];
            }
        }),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].data.len();
                let gs = &g[offset..offset + len];
                acc(grads, nodes, p, |s| s.iter_mut().zip(gs).for_each(|(x, y)| *x += y));
                offset += len;
            }
        }
        &Op::Min(a, b) => {
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            // ties resolve to the first argument
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if da[i] <= db[i] {
                        s[i] += g[i];
                    }
                }
            });
            acc(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    if db[i] < da[i] {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Max(a, b) => {
            let (da, db) = (&nodes[a].data, &nodes[b].data);
            acc(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if da[i] >= db[i] {
                        s[i] += g[i];
                    }
                }
            });
            acc(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    if db[i] > da[i] {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Paste { base, block, origin } => {
            let (bw, ch) = (nodes[base].shape[1], nodes[base].shape[2]);
            let (h, w) = (nodes[block].shape[0], nodes[block].shape[1]);
            let inside = |r: usize, c: usize| {
                r >= origin.0 && r < origin.0 + h && c >= origin.1 && c < origin.1 + w
            };
            acc(grads, nodes, base, |s| {
                for (i, x) in s.iter_mut().enumerate() {
                    let (r, c) = (i / ch / bw, (i / ch) % bw);
                    if !inside(r, c) {
                        *x += g[i];
                    }
                }
            });
            acc(grads, nodes, block, |s| {
                for r in 0..h {
                    for c in 0..w {
                        for k in 0..ch {
                            s[(r * w + c) * ch + k] += g[((origin.0 + r) * bw + origin.1 + c) * ch + k];
                        }
                    }
                }
            });
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'a> Var<'a> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape_ref(&self) -> &'a Tape<'a> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.data.to_vec()).expect("node shape")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, shape: Option<Vec<usize>>, f: impl FnOnce(&[f64]) -> Vec<f64>) -> Var<'a> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (shape.unwrap_or_else(|| n.shape.clone()), f(&n.data), n.requires_grad)
        };
        self.tape.push(shape, Cow::Owned(data), op, rg)
    }

    fn binary_same(
        self,
        other: Var<'a>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'a>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::Dimension {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, Cow::Owned(data), op, rg))
    }

    pub fn add(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Elementwise minimum; on ties the gradient goes to `self`.
    pub fn minimum(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "min", Op::Min(self.id, other.id), |a, b| if a <= b { a } else { b })
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn maximum(self, other: Var<'a>) -> Result<Var<'a>> {
        self.binary_same(other, "max", Op::Max(self.id, other.id), |a, b| if a >= b { a } else { b })
    }

    pub fn scale(self, c: f64) -> Var<'a> {
        self.unary(Op::Scale(self.id, c), None, |d| d.iter().map(|x| x * c).collect())
    }

    /// Multiplies every element by a scalar-valued variable.
    pub fn mul_scalar(self, scalar: Var<'a>) -> Result<Var<'a>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, s) = (&nodes[self.id], &nodes[scalar.id]);
            if s.data.len() != 1 {
                return Err(Error::Dimension {
                    op: "mul_scalar",
                    lhs: a.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            let c = s.data[0];
            let data = a.data.iter().map(|x| x * c).collect();
            (a.shape.clone(), data, a.requires_grad || s.requires_grad)
        };
        Ok(self.tape.push(shape, Cow::Owned(data), Op::MulScalar(self.id, scalar.id), rg))
    }

    pub fn neg(self) -> Var<'a> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'a> {
        self.unary(Op::AddScalar(self.id), None, |d| d.iter().map(|x| x + c).collect())
    }

    pub fn relu(self) -> Var<'a> {
        self.unary(Op::Relu(self.id), None, |d| d.iter().map(|&x| x.max(0.0)).collect())
    }

    pub fn tanh(self) -> Var<'a> {
        self.unary(Op::Tanh(self.id), None, |d| d.iter().map(|x| x.tanh()).collect())
    }

    pub fn exp(self) -> Var<'a> {
        self.unary(Op::Exp(self.id), None, |d| d.iter().map(|x| x.exp()).collect())
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(self) -> Result<Var<'a>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(bad) = nodes[self.id].data.iter().find(|x| !(**x > 0.0)) {
                return Err(Error::Numeric(format!("sqrt of non-positive value {bad}")));
            }
        }
        Ok(self.unary(Op::Sqrt(self.id), None, |d| d.iter().map(|x| x.sqrt()).collect()))
    }

    pub fn log(self) -> Result<Var<'a>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(bad) = nodes[self.id].data.iter().find(|&&x| x.is_nan() || x <= 0.0) {
                return Err(Error::Numeric(format!("log of non-positive value {bad}")));
            }
        }
        Ok(self.unary(Op::Log(self.id), None, |d| d.iter().map(|x| x.ln()).collect()))
    }

    pub fn sum(self) -> Var<'a> {
        self.unary(Op::Sum(self.id), Some(vec![]), |d| vec![d.iter().sum()])
    }

    pub fn mean(self) -> Var<'a> {
        self.unary(Op::Mean(self.id), Some(vec![]), |d| {
            vec![d.iter().sum::<f64>() / d.len() as f64]
        })
    }

    /// Mean over consecutive row segments of a rank-2 value.
    pub fn segment_mean(self, lengths: &[usize]) -> Result<Var<'a>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if lengths.iter().sum::<usize>() != rows || lengths.contains(&0) {
            return Err(Error::Shape(format!(
                "segments {lengths:?} do not partition {rows} rows"
            )));
        }
        let lens = lengths.to_vec();
        Ok(self.unary(
            Op::SegmentMean(self.id, lens.clone()),
            Some(vec![lens.len(), cols]),
            |d| {
                let mut out = vec![0.0; lens.len() * cols];
                let mut row = 0;
                for (s, &len) in lens.iter().enumerate() {
                    let o = &mut out[s * cols..(s + 1) * cols];
                    for r in row..row + len {
                        o.iter_mut().zip(&d[r * cols..(r + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                    o.iter_mut().for_each(|x| *x /= len as f64);
                    row += len;
                }
                out
            },
        ))
    }

    /// Column-wise max over consecutive row segments; the gradient goes to
    /// the first maximal row.
    pub fn segment_max(self, lengths: &[usize]) -> Result<Var<'a>> {
        let shape = self.shape();
        let (rows, cols) = rows_cols(&shape);
        if lengths.iter().sum::<usize>() != rows || lengths.contains(&0) {
            return Err(Error::Shape(format!(
                "segments {lengths:?} do not partition {rows} rows"
            )));
        }
        let lens = lengths.to_vec();
        Ok(self.unary(
            Op::SegmentMax(self.id, lens.clone()),
            Some(vec![lens.len(), cols]),
            |d| {
                let mut out = Vec::with_capacity(lens.len() * cols);
                let mut start = 0;
                for &len in &lens {
                    for j in 0..cols {
                        out.push(d[segment_argmax(d, cols, start, len, j) * cols + j]);
                    }
                    start += len;
                }
                out
            },
        ))
    }

    /// Mean over rows of a rank-2 value (rank-1 result).
    pub fn mean_rows(self) -> Result<Var<'a>> {
        let rows = rows_cols(&self.shape()).0;
        let cols = rows_cols(&self.shape()).1;
        self.segment_mean(&[rows])?.reshape(vec![cols])
    }

    pub fn matmul(self, other: Var<'a>) -> Result<Var<'a>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            matmul_acc(&a.data, &b.data, &mut out, m, k, n);
            (vec![m, n], out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, Cow::Owned(data), Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'a>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        Ok(self.unary(Op::Transpose(self.id), Some(vec![c, r]), |d| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            out
        }))
    }

    /// Adds a rank-1 `row` to every row of `self`.
    pub fn add_row(self, row: Var<'a>) -> Result<Var<'a>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[row.id]);
            let cols = rows_cols(&a.shape).1;
            if b.shape.len() != 1 || b.shape[0] != cols {
                return Err(Error::Dimension {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut out = a.data.to_vec();
            for r in out.chunks_mut(cols) {
                r.iter_mut().zip(b.data.iter()).for_each(|(x, y)| *x += y);
            }
            (a.shape.clone(), out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, Cow::Owned(data), Op::AddRow(self.id, row.id), rg))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(self) -> Result<Var<'a>> {
        let shape = self.shape();
        let cols = rows_cols(&shape).1;
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[self.id].data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("softmax input is not finite".into()));
            }
        }
        Ok(self.unary(Op::SoftmaxRows(self.id), None, |d| {
            let mut out = d.to_vec();
            out.chunks_mut(cols).for_each(softmax_in_place);
            out
        }))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn normalize_rows(self) -> Result<Var<'a>> {
        let (shape, data, norms, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let cols = rows_cols(&a.shape).1;
            let mut out = a.data.to_vec();
            let mut norms = Vec::with_capacity(out.len() / cols);
            for row in out.chunks_mut(cols) {
                let norm = dot(row, row).sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::Numeric(format!("cannot normalize a vector of norm {norm}")));
                }
                row.iter_mut().for_each(|x| *x /= norm);
                norms.push(norm);
            }
            (a.shape.clone(), out, norms, a.requires_grad)
        };
        let var = self.tape.push(shape, Cow::Owned(data), Op::NormalizeRows(self.id), rg);
        self.tape.nodes.borrow_mut()[var.id].saved = norms;
        Ok(var)
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` along the last axis.
    pub fn standardize_rows(self, eps: f64) -> Result<Var<'a>> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("standardize eps must be positive, got {eps}")));
        }
        let (shape, data, sigmas, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let cols = rows_cols(&a.shape).1;
            let n = cols as f64;
            let mut out = a.data.to_vec();
            let mut sigmas = Vec::with_capacity(out.len() / cols);
            for row in out.chunks_mut(cols) {
                let mean = row.iter().sum::<f64>() / n;
                row.iter_mut().for_each(|x| *x -= mean);
                let sigma = (dot(row, row) / n + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= sigma);
                sigmas.push(sigma);
            }
            (a.shape.clone(), out, sigmas, a.requires_grad)
        };
        let var = self.tape.push(shape, Cow::Owned(data), Op::StandardizeRows(self.id), rg);
        self.tape.nodes.borrow_mut()[var.id].saved = sigmas;
        Ok(var)
    }

    /// Output element `i` is `self.flat[indices[i]]`.
    pub fn gather(self, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var<'a>> {
        let len = self.tape.nodes.borrow()[self.id].data.len();
        if numel(&shape) != indices.len() {
            return Err(Error::Shape(format!(
                "gather of {} indices into shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                len,
            });
        }
        let idx = indices.clone();
        Ok(self.unary(Op::Gather(self.id, indices), Some(shape), |d| {
            idx.iter().map(|&i| d[i]).collect()
        }))
    }

    /// Selects rows of a rank-2 value.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'a>> {
        let shape = self.shape();
        let (nrows, cols) = rows_cols(&shape);
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                len: nrows,
            });
        }
        let idx = rows.iter().flat_map(|&r| r * cols..(r + 1) * cols).collect();
        self.gather(idx, vec![rows.len(), cols])
    }

    /// Scalar at flat position `index`.
    pub fn at(self, index: usize) -> Result<Var<'a>> {
        self.gather(vec![index], vec![])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'a>> {
        let current = self.shape();
        if numel(&shape) != numel(&current) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: current,
                rhs: shape,
            });
        }
        Ok(self.unary(Op::Reshape(self.id), Some(shape), |d| d.to_vec()))
    }

    /// Copies `block` (h×w×c) over `self` (H×W×c) at `origin`.
    pub fn paste(self, block: Var<'a>, origin: (usize, usize)) -> Result<Var<'a>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[block.id]);
            let ok = a.shape.len() == 3
                && b.shape.len() == 3
                && a.shape[2] == b.shape[2]
                && origin.0 + b.shape[0] <= a.shape[0]
                && origin.1 + b.shape[1] <= a.shape[1];
            if !ok {
                return Err(Error::Dimension {
                    op: "paste",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (bw, ch) = (a.shape[1], a.shape[2]);
            let (h, w) = (b.shape[0], b.shape[1]);
            let mut out = a.data.to_vec();
            for r in 0..h {
                let dst = ((origin.0 + r) * bw + origin.1) * ch;
                out[dst..dst + w * ch].copy_from_slice(&b.data[r * w * ch..(r + 1) * w * ch]);
            }
            (a.shape.clone(), out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            Cow::Owned(data),
            Op::Paste {
                base: self.id,
                block: block.id,
                origin,
            },
            rg,
        ))
    }

    pub fn dot(self, other: Var<'a>) -> Result<Var<'a>> {
        Ok(self.mul(other)?.sum())
    }

    /// Cosine similarity of two rank-1 values.
    pub fn cosine_sim(self, other: Var<'a>) -> Result<Var<'a>> {
        self.normalize_rows()?.dot(other.normalize_rows()?)
    }
}
