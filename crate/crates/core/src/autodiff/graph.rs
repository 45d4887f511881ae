use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable weight.
    Parameter,
    /// Data or auxiliary value bound per evaluation.
    Input,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf { kind: LeafKind, name: String },
    Const(Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    /// Heaviside step, 1 where the operand is strictly positive. Zero derivative.
    Step(NodeId),
    Square(NodeId),
    Recip(NodeId),
    /// Sum of all entries into a `1 x 1` tensor.
    Sum(NodeId),
    /// `out[i][j] = a[i][idx[j]]`; indices may repeat.
    GatherCols(NodeId, Arc<[usize]>),
    /// Adjoint of `GatherCols`: `out[i][idx[j]] += a[i][j]` into `cols` columns.
    ScatterCols(NodeId, Arc<[usize]>, usize),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Square(_) => "square",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::GatherCols(..) => "gather_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::Concat(_) => "concat",
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::GatherCols(a, _)
            | Op::ScatterCols(a, _, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub rows: usize,
    pub cols: usize,
}

/// Append-only computation graph over 2-D tensors.
///
/// Node ids are handed out in append order and every operand precedes its
/// consumer, so append order is a topological order. Shape errors found while
/// building are recorded and surface on the first evaluation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    error: Option<(usize, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        let n = &self.nodes[id.0];
        [n.rows, n.cols]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// First structural error recorded while building, if any.
    pub fn validate(&self) -> Result<()> {
        match &self.error {
            Some((node, msg)) => Err(Error::Structural { node: *node, msg: msg.clone() }),
            None => Ok(()),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, LeafKind, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Leaf { kind, name } => Some((NodeId(i), *kind, name.as_str())),
            _ => None,
        })
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves().find(|(_, _, n)| *n == name).map(|(id, _, _)| id)
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match &self.nodes[id.0].op {
            Op::Leaf { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let id = self.nodes.len();
        for operand in op.operands() {
            if operand.0 >= id {
                self.fail(id, format!("operand {} does not precede node", operand.0));
            }
        }
        self.nodes.push(Node { op, rows, cols });
        NodeId(id)
    }

    fn fail(&mut self, node: usize, msg: String) {
        if self.error.is_none() {
            self.error = Some((node, msg));
        }
    }

    pub fn parameter(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf { kind: LeafKind::Parameter, name: name.into() }, rows, cols)
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf { kind: LeafKind::Input, name: name.into() }, rows, cols)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let (r, c) = (value.rows(), value.cols());
        self.push(Op::Const(Arc::new(value)), r, c)
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(Tensor::filled(rows, cols, 1.0))
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let id = self.nodes.len();
        let op = make(a, b);
        if sa != sb {
            self.fail(id, format!("{} operands {:?} vs {:?}", op.name(), sa, sb));
        }
        self.push(op, sa[0], sa[1])
    }

    fn unary(&mut self, a: NodeId, op: Op) -> NodeId {
        let [r, c] = self.shape(a);
        self.push(op, r, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same(a, b, Op::Mul)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let id = self.nodes.len();
        if sa[1] != sb[0] {
            self.fail(id, format!("matmul {:?} by {:?}", sa, sb));
        }
        self.push(Op::MatMul(a, b), sa[0], sb[1])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        self.push(Op::Transpose(a), c, r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a))
    }

    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Step(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Recip(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: impl Into<Arc<[usize]>>) -> NodeId {
        let idx: Arc<[usize]> = idx.into();
        let [r, c] = self.shape(a);
        let id = self.nodes.len();
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            self.fail(id, format!("gather index {bad} out of {c} columns"));
        }
        let n = idx.len();
        self.push(Op::GatherCols(a, idx), r, n)
    }

    pub fn scatter_cols(&mut self, a: NodeId, idx: impl Into<Arc<[usize]>>, cols: usize) -> NodeId {
        let idx: Arc<[usize]> = idx.into();
        let [r, c] = self.shape(a);
        let id = self.nodes.len();
        if idx.len() != c {
            self.fail(id, format!("scatter needs {c} indices, got {}", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= cols) {
            self.fail(id, format!("scatter index {bad} out of {cols} columns"));
        }
        self.push(Op::ScatterCols(a, idx, cols), r, cols)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(a, idx)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        let rows = parts.first().map_or(0, |p| self.shape(*p)[0]);
        let mut cols = 0;
        for p in parts {
            let [r, c] = self.shape(*p);
            if r != rows {
                self.fail(id, format!("concat row mismatch {r} vs {rows}"));
            }
            cols += c;
        }
        self.push(Op::Concat(parts.to_vec()), rows, cols)
    }

    // Composite helpers built from primitives.

    /// `a + 1 * bias` where `bias` is `1 x c` and `a` is `r x c`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let rows = self.shape(a)[0];
        let ones = self.ones(rows, 1);
        let b = self.matmul(ones, bias);
        self.add(a, b)
    }

    /// Per-row sums as an `r x 1` column.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let cols = self.shape(a)[1];
        let ones = self.ones(cols, 1);
        self.matmul(a, ones)
    }

    /// Repeat an `r x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let ones = self.ones(1, cols);
        self.matmul(a, ones)
    }

    /// `x * w^T` for a batch `x` (`r x in`) and weight `w` (`out x in`).
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let wt = self.transpose(w);
        self.matmul(x, wt)
    }

    // Reverse-mode construction.

    /// Append nodes computing `d output / d wrt[i]` for each requested node.
    ///
    /// The adjoint nodes are ordinary graph nodes, so the result can itself be
    /// differentiated. Requested nodes that do not influence `output` get an
    /// explicit zero constant.
    pub fn gradient_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.validate()?;
        if self.shape(output) != [1, 1] {
            return Err(Error::Structural {
                node: output.0,
                msg: format!("gradient of non-scalar output {:?}", self.shape(output)),
            });
        }
        let end = output.0 + 1;
        // Only propagate through nodes that some requested node feeds into.
        let mut live = vec![false; end];
        for w in wrt {
            if w.0 < end {
                live[w.0] = true;
            }
        }
        for i in 0..end {
            if !live[i] && self.nodes[i].op.operands().iter().any(|o| live[o.0]) {
                live[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if live[output.0] {
            adjoint[output.0] = Some(self.ones(1, 1));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = NodeId(i);
            for (operand, contribution) in self.vjp(&op, out, g, &live)? {
                let acc = match adjoint[operand.0] {
                    Some(prev) => self.add(prev, contribution),
                    None => contribution,
                };
                adjoint[operand.0] = Some(acc);
            }
        }

        let mut result = Vec::with_capacity(wrt.len());
        for w in wrt {
            let node = match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let [r, c] = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            };
            result.push(node);
        }
        self.validate()?;
        Ok(result)
    }

    /// Vector-Jacobian contributions of one node to its live operands.
    fn vjp(&mut self, op: &Op, out: NodeId, g: NodeId, live: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let mut contrib = Vec::with_capacity(2);
        let is_live = |n: &NodeId| live[n.0];
        match op {
            Op::Leaf { .. } | Op::Const(_) | Op::Step(_) => {}
            Op::Add(a, b) => {
                if is_live(a) {
                    contrib.push((*a, g));
                }
                if is_live(b) {
                    contrib.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if is_live(a) {
                    contrib.push((*a, g));
                }
                if is_live(b) {
                    let neg = self.scale(g, -1.0);
                    contrib.push((*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if is_live(a) {
                    let ga = self.mul(g, *b);
                    contrib.push((*a, ga));
                }
                if is_live(b) {
                    let gb = self.mul(g, *a);
                    contrib.push((*b, gb));
                }
            }
            Op::MatMul(a, b) => {
                if is_live(a) {
                    let bt = self.transpose(*b);
                    let ga = self.matmul(g, bt);
                    contrib.push((*a, ga));
                }
                if is_live(b) {
                    let at = self.transpose(*a);
                    let gb = self.matmul(at, g);
                    contrib.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                if is_live(a) {
                    let ga = self.transpose(g);
                    contrib.push((*a, ga));
                }
            }
            Op::Scale(a, c) => {
                if is_live(a) {
                    let ga = self.scale(g, *c);
                    contrib.push((*a, ga));
                }
            }
            Op::AddScalar(a, _) => {
                if is_live(a) {
                    contrib.push((*a, g));
                }
            }
            Op::Tanh(a) => {
                if is_live(a) {
                    // 1 - tanh^2, reusing the node's own output
                    let t2 = self.square(out);
                    let neg = self.scale(t2, -1.0);
                    let d = self.add_scalar(neg, 1.0);
                    let ga = self.mul(g, d);
                    contrib.push((*a, ga));
                }
            }
            Op::Sigmoid(a) => {
                if is_live(a) {
                    let neg = self.scale(out, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let d = self.mul(out, one_minus);
                    let ga = self.mul(g, d);
                    contrib.push((*a, ga));
                }
            }
            Op::Softplus(a) => {
                if is_live(a) {
                    let d = self.sigmoid(*a);
                    let ga = self.mul(g, d);
                    contrib.push((*a, ga));
                }
            }
            Op::Relu(a) => {
                if is_live(a) {
                    let d = self.step(*a);
                    let ga = self.mul(g, d);
                    contrib.push((*a, ga));
                }
            }
            Op::Square(a) => {
                if is_live(a) {
                    let two_a = self.scale(*a, 2.0);
                    let ga = self.mul(g, two_a);
                    contrib.push((*a, ga));
                }
            }
            Op::Recip(a) => {
                if is_live(a) {
                    let r2 = self.square(out);
                    let p = self.mul(g, r2);
                    let ga = self.scale(p, -1.0);
                    contrib.push((*a, ga));
                }
            }
            Op::Sum(a) => {
                if is_live(a) {
                    let [r, c] = self.shape(*a);
                    let col = self.ones(r, 1);
                    let row = self.ones(1, c);
                    let gc = self.matmul(col, g);
                    let ga = self.matmul(gc, row);
                    contrib.push((*a, ga));
                }
            }
            Op::GatherCols(a, idx) => {
                if is_live(a) {
                    let cols = self.shape(*a)[1];
                    let ga = self.scatter_cols(g, idx.clone(), cols);
                    contrib.push((*a, ga));
                }
            }
            Op::ScatterCols(a, idx, _) => {
                if is_live(a) {
                    let ga = self.gather_cols(g, idx.clone());
                    contrib.push((*a, ga));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if is_live(p) {
                        let gp = self.slice_cols(g, offset, c);
                        contrib.push((*p, gp));
                    }
                    offset += c;
                }
            }
        }
        Ok(contrib)
    }

    // Evaluation.

    /// Evaluate every node.
    pub fn forward(&self, bindings: &Bindings<'_>) -> Result<Values> {
        let all: Vec<NodeId> = (0..self.nodes.len()).map(NodeId).collect();
        self.evaluate(bindings, &all)
    }

    /// Evaluate only the nodes that `outputs` depend on.
    pub fn evaluate(&self, bindings: &Bindings<'_>, outputs: &[NodeId]) -> Result<Values> {
        self.validate()?;
        let end = outputs.iter().map(|o| o.0 + 1).max().unwrap_or(0);
        let mut needed = vec![false; end];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..end).rev() {
            if needed[i] {
                for o in self.nodes[i].op.operands() {
                    needed[o.0] = true;
                }
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; end];
        for i in 0..end {
            if !needed[i] {
                continue;
            }
            let v = self.eval_node(i, bindings, &values)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i });
            }
            values[i] = Some(v);
        }
        Ok(Values { values })
    }

    fn eval_node(&self, i: usize, bindings: &Bindings<'_>, vals: &[Option<Tensor>]) -> Result<Tensor> {
        let node = &self.nodes[i];
        let v = |id: &NodeId| vals[id.0].as_ref().expect("operand evaluated before consumer");
        let structural = |msg: String| Error::Structural { node: i, msg };
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let t = bindings
                    .get(NodeId(i))
                    .ok_or_else(|| structural(format!("leaf '{name}' is not bound")))?;
                if t.shape() != [node.rows, node.cols] {
                    return Err(structural(format!(
                        "leaf '{name}' declared {}x{}, bound {:?}",
                        node.rows,
                        node.cols,
                        t.shape()
                    )));
                }
                t.clone()
            }
            Op::Const(t) => (**t).clone(),
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Op::MatMul(a, b) => v(a).matmul(v(b)).map_err(|e| structural(e.to_string()))?,
            Op::Transpose(a) => v(a).transpose(),
            Op::Scale(a, c) => v(a).map(|x| c * x),
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Recip(a) => v(a).map(|x| 1.0 / x),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::GatherCols(a, idx) => {
                let src = v(a);
                Tensor::from_fn(src.rows(), idx.len(), |r, j| src.get(r, idx[j]))
            }
            Op::ScatterCols(a, idx, cols) => {
                let src = v(a);
                let mut out = Tensor::zeros(src.rows(), *cols);
                for r in 0..src.rows() {
                    for (j, &target) in idx.iter().enumerate() {
                        let cur = out.get(r, target);
                        out.set(r, target, cur + src.get(r, j));
                    }
                }
                out
            }
            Op::Concat(parts) => {
                let mut out = Tensor::zeros(node.rows, node.cols);
                let mut offset = 0;
                for p in parts {
                    let src = v(p);
                    for r in 0..src.rows() {
                        for c in 0..src.cols() {
                            out.set(r, offset + c, src.get(r, c));
                        }
                    }
                    offset += src.cols();
                }
                out
            }
        };
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Leaf values for one evaluation. Borrowed, so parameters are not copied
/// until the leaf node itself is materialised.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: HashMap<NodeId, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.map.insert(leaf, value);
        self
    }

    pub fn with(mut self, leaf: NodeId, value: &'a Tensor) -> Self {
        self.map.insert(leaf, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&'a Tensor> {
        self.map.get(&leaf).copied()
    }
}

/// Node values produced by [`Graph::forward`] / [`Graph::evaluate`].
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Option<Tensor>>,
}

impl Values {
    /// Value of an evaluated node. Panics if the node was pruned.
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("node was not evaluated")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.values[id.0].take().expect("node was not evaluated")
    }
}
