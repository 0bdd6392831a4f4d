use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, gemm};
use super::{GradStore, ParamId, ParamRegistry, Shape};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis a softmax or concatenation runs along.
///
/// `Rows` is axis 0: softmax normalises every column, concatenation stacks
/// rows. `Cols` is axis 1: softmax normalises every row, concatenation
/// places blocks side by side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Add { a: NodeId, b: NodeId, bcast: Bcast },
    Sub { a: NodeId, b: NodeId, bcast: Bcast },
    Mul { a: NodeId, b: NodeId, bcast: Bcast },
    Scale { a: NodeId, factor: f64 },
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax { a: NodeId, axis: Axis },
    Conv1d { x: NodeId, w: NodeId, bias: Option<NodeId>, width: usize, cols: Vec<f64> },
    MaxSeq { a: NodeId, idx: Vec<usize> },
    Top2Seq { a: NodeId, first: Vec<usize>, second: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: Axis },
    SliceCols { a: NodeId, start: usize },
    Transpose(NodeId),
    Dropout { a: NodeId, mask: Vec<f64> },
    SoftmaxXent { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Gather { table: NodeId, ids: Vec<Option<usize>> },
    Sum(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxSeq { .. } => "max_seq",
            Op::Top2Seq { .. } => "top2_seq",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax { a, .. }
            | Op::MaxSeq { a, .. }
            | Op::Top2Seq { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Transpose(a)
            | Op::Dropout { a, .. }
            | Op::Sum(a) => vec![*a],
            Op::Conv1d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                p.extend(bias);
                p
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    shape: Shape,
    data: Cow<'a, [f64]>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation graph. Borrowed data (parameters, constant
/// tables) lives for `'a`.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    params: Option<&'a ParamRegistry>,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(params: &'a ParamRegistry) -> Self {
        Graph {
            params: Some(params),
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// The single value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// The parameter a leaf node reads, if any.
    pub fn param_of(&self, id: NodeId) -> Option<ParamId> {
        match self.nodes[id.0].op {
            Op::Param(p) => Some(p),
            _ => None,
        }
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    fn push(&mut self, shape: Shape, data: Cow<'a, [f64]>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.numel(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_len(shape: Shape, len: usize, op: &'static str) -> Result<()> {
        if shape.numel() != len {
            return Err(Error::shape(op, shape, Shape::new(len, 1)));
        }
        Ok(())
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: Shape, data: Vec<f64>) -> Result<NodeId> {
        Self::check_len(shape, data.len(), "constant")?;
        Ok(self.push(shape, Cow::Owned(data), false, Op::Leaf))
    }

    /// Constant leaf borrowing external storage.
    pub fn constant_ref(&mut self, shape: Shape, data: &'a [f64]) -> Result<NodeId> {
        Self::check_len(shape, data.len(), "constant")?;
        Ok(self.push(shape, Cow::Borrowed(data), false, Op::Leaf))
    }

    /// Leaf that accumulates gradient but is not a registered parameter.
    pub fn variable(&mut self, shape: Shape, data: Vec<f64>) -> Result<NodeId> {
        Self::check_len(shape, data.len(), "variable")?;
        Ok(self.push(shape, Cow::Owned(data), true, Op::Leaf))
    }

    /// Leaf bound to a registered parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let registry = self.params.expect("graph was built without a parameter registry");
        let p = registry.get(id);
        let node = self.push(p.shape, Cow::Borrowed(&p.data), true, Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    /// `op(a) * op(b)`, with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let oa = if trans_a { sa.transposed() } else { sa };
        let ob = if trans_b { sb.transposed() } else { sb };
        if oa.cols != ob.rows {
            return Err(Error::shape("matmul", oa, ob));
        }
        let (m, k, n) = (oa.rows, oa.cols, ob.cols);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), trans_a, self.value(b), trans_b, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Shape::new(m, n), Cow::Owned(out), rg, Op::MatMul { a, b, trans_a, trans_b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    fn bcast(op: &'static str, a: Shape, b: Shape) -> Result<Bcast> {
        if a == b {
            Ok(Bcast::Full)
        } else if b == Shape::row(a.cols) {
            Ok(Bcast::Row)
        } else if b == Shape::new(a.rows, 1) {
            Ok(Bcast::Col)
        } else if b.is_scalar() {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::shape(op, a, b))
        }
    }

    fn zip_bcast(&self, a: NodeId, b: NodeId, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let s = self.shape(a);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(av.len());
        for r in 0..s.rows {
            for c in 0..s.cols {
                let bi = match bc {
                    Bcast::Full => r * s.cols + c,
                    Bcast::Row => c,
                    Bcast::Col => r,
                    Bcast::Scalar => 0,
                };
                out.push(f(av[r * s.cols + c], bv[bi]));
            }
        }
        out
    }

    /// Elementwise sum; `b` may also be a `1 x cols` row, a `rows x 1`
    /// column, or a scalar, broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = Self::bcast("add", self.shape(a), self.shape(b))?;
        let out = self.zip_bcast(a, b, bcast, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), Cow::Owned(out), rg, Op::Add { a, b, bcast }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = Self::bcast("sub", self.shape(a), self.shape(b))?;
        let out = self.zip_bcast(a, b, bcast, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), Cow::Owned(out), rg, Op::Sub { a, b, bcast }))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = Self::bcast("mul", self.shape(a), self.shape(b))?;
        let out = self.zip_bcast(a, b, bcast, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a), Cow::Owned(out), rg, Op::Mul { a, b, bcast }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a), Cow::Owned(out), rg, Op::Scale { a, factor })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|&v| kernels::sigmoid(v)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a), Cow::Owned(out), rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a), Cow::Owned(out), rg, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let s = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        match axis {
            Axis::Cols => {
                for r in 0..s.rows {
                    let lane = &v[r * s.cols..(r + 1) * s.cols];
                    kernels::softmax_lane(lane.iter().copied(), &mut out[r * s.cols..(r + 1) * s.cols]);
                }
            }
            Axis::Rows => {
                let mut lane_out = vec![0.0; s.rows];
                for c in 0..s.cols {
                    kernels::softmax_lane((0..s.rows).map(|r| v[r * s.cols + c]), &mut lane_out);
                    for (r, val) in lane_out.iter().enumerate() {
                        out[r * s.cols + c] = *val;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(s, Cow::Owned(out), rg, Op::Softmax { a, axis })
    }

    /// One-dimensional convolution over the row (sequence) axis with zero
    /// same-padding. `x` is `N x d_in`, `w` is `(width * d_in) x d_out` with
    /// row block `j` applied to input offset `j - (width - 1) / 2`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, width: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if width == 0 || sw.rows != width * sx.cols {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let d_out = sw.cols;
        if let Some(b) = bias {
            if self.shape(b) != Shape::row(d_out) {
                return Err(Error::shape("conv1d", sw, self.shape(b)));
            }
        }
        let cols = im2col(self.value(x), sx, width);
        let n = sx.rows;
        let mut out = match bias {
            Some(b) => self.value(b).repeat(n),
            None => vec![0.0; n * d_out],
        };
        gemm(n, width * sx.cols, d_out, &cols, false, self.value(w), false, 1.0, &mut out);
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Shape::new(n, d_out),
            Cow::Owned(out),
            rg,
            Op::Conv1d {
                x,
                w,
                bias,
                width,
                cols: if rg { cols } else { Vec::new() },
            },
        ))
    }

    /// Per-column maximum over rows; ties go to the lowest row.
    pub fn max_seq(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.rows == 0 {
            return Err(Error::shape("max_seq", s, Shape::SCALAR));
        }
        let v = self.value(a);
        let mut idx = vec![0usize; s.cols];
        let mut out = vec![0.0; s.cols];
        for c in 0..s.cols {
            let mut best = 0;
            for r in 1..s.rows {
                if v[r * s.cols + c] > v[best * s.cols + c] {
                    best = r;
                }
            }
            idx[c] = best;
            out[c] = v[best * s.cols + c];
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Shape::row(s.cols), Cow::Owned(out), rg, Op::MaxSeq { a, idx }))
    }

    /// Per-column largest and second-largest values over rows, laid out as
    /// all maxima followed by all second maxima (`1 x 2*cols`). Ties go to
    /// the lower row; with a single row the second maximum equals the first.
    pub fn top2_seq(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.rows == 0 {
            return Err(Error::shape("top2_seq", s, Shape::SCALAR));
        }
        let v = self.value(a);
        let mut first = vec![0usize; s.cols];
        let mut second = vec![0usize; s.cols];
        let mut out = vec![0.0; 2 * s.cols];
        for c in 0..s.cols {
            let at = |r: usize| v[r * s.cols + c];
            let mut f = 0;
            for r in 1..s.rows {
                if at(r) > at(f) {
                    f = r;
                }
            }
            let mut sc = if s.rows == 1 { 0 } else if f == 0 { 1 } else { 0 };
            for r in 0..s.rows {
                if r != f && at(r) > at(sc) {
                    sc = r;
                }
            }
            first[c] = f;
            second[c] = sc;
            out[c] = at(f);
            out[s.cols + c] = at(sc);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Shape::row(2 * s.cols), Cow::Owned(out), rg, Op::Top2Seq { a, first, second }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let Some(&head) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero nodes".into()));
        };
        let s0 = self.shape(head);
        let shape = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.cols != s0.cols {
                        return Err(Error::shape("concat", s0, s));
                    }
                    rows += s.rows;
                }
                Shape::new(rows, s0.cols)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.rows != s0.rows {
                        return Err(Error::shape("concat", s0, s));
                    }
                    cols += s.cols;
                }
                Shape::new(s0.rows, cols)
            }
        };
        let mut out = Vec::with_capacity(shape.numel());
        match axis {
            Axis::Rows => {
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
            }
            Axis::Cols => {
                for r in 0..shape.rows {
                    for &p in parts {
                        let c = self.shape(p).cols;
                        out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                    }
                }
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + width > s.cols || width == 0 {
            return Err(Error::shape("slice_cols", s, Shape::new(start, width)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(s.rows * width);
        for r in 0..s.rows {
            out.extend_from_slice(&v[r * s.cols + start..r * s.cols + start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Shape::new(s.rows, width), Cow::Owned(out), rg, Op::SliceCols { a, start }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for r in 0..s.rows {
            for c in 0..s.cols {
                out[c * s.rows + r] = v[r * s.cols + c];
            }
        }
        let rg = self.rg(&[a]);
        self.push(s.transposed(), Cow::Owned(out), rg, Op::Transpose(a))
    }

    /// Inverted dropout: each entry is zeroed with probability `p` and the
    /// survivors scaled by `1 / (1 - p)`. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.shape(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a), Cow::Owned(out), rg, Op::Dropout { a, mask }))
    }

    /// Summed cross-entropy of `softmax(logits)` against one-hot targets,
    /// one per row. Rows with `None` contribute nothing.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let s = self.shape(logits);
        if targets.len() != s.rows {
            return Err(Error::shape("softmax_cross_entropy", s, Shape::new(targets.len(), 1)));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= s.cols) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: target {t} out of range for {} classes",
                s.cols
            )));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let lane = &v[r * s.cols..(r + 1) * s.cols];
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lane.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (p, x) in probs[r * s.cols..(r + 1) * s.cols].iter_mut().zip(lane) {
                *p = (x - lse).exp();
            }
            if let Some(t) = target {
                loss += lse - lane[*t];
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Shape::SCALAR,
            Cow::Owned(vec![loss]),
            rg,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[Option<usize>]) -> Result<NodeId> {
        let s = self.shape(table);
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= s.rows) {
            return Err(Error::InvalidArgument(format!("gather: row {bad} out of range for table {s}")));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * s.cols);
        for id in ids {
            match id {
                Some(i) => out.extend_from_slice(&v[i * s.cols..(i + 1) * s.cols]),
                None => out.extend(std::iter::repeat_n(0.0, s.cols)),
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Shape::new(ids.len(), s.cols),
            Cow::Owned(out),
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Shape::SCALAR, Cow::Owned(vec![total]), rg, Op::Sum(a))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d root / d node` into every reachable node that requires
    /// gradient. Repeated calls accumulate.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let s = self.shape(root);
        if !s.is_scalar() {
            return Err(Error::NonScalarRoot(s));
        }
        self.backward_from(&[(root, &[1.0])])
    }

    /// Backward sweep seeded with explicit upstream gradients, for graphs
    /// whose outputs feed a computation recorded elsewhere.
    pub fn backward_from(&mut self, seeds: &[(NodeId, &[f64])]) -> Result<()> {
        let mut top = 0;
        for (id, g) in seeds {
            Self::check_len(self.shape(*id), g.len(), "backward seed")?;
            self.accumulate(*id, g);
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, id: NodeId, contrib: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
            None => node.grad = Some(contrib),
        }
    }

    /// Mutable gradient buffer of `id`, zero-initialised on first use.
    fn grad_buf(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.data.len();
        Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
    }

    fn reduce_bcast(&self, shape: Shape, bc: Bcast, g: &[f64]) -> Vec<f64> {
        match bc {
            Bcast::Full => g.to_vec(),
            Bcast::Row => {
                let mut out = vec![0.0; shape.cols];
                for row in g.chunks(shape.cols) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out
            }
            Bcast::Col => g.chunks(shape.cols).map(|row| row.iter().sum()).collect(),
            Bcast::Scalar => vec![g.iter().sum()],
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out_shape = self.nodes[i].shape;
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (a, b, ta, tb) = (*a, *b, *trans_a, *trans_b);
                let sa = self.shape(a);
                let (m, n) = (out_shape.rows, out_shape.cols);
                let k = if ta { sa.rows } else { sa.cols };
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    if ta {
                        gemm(k, n, m, self.value(b), tb, g, true, 0.0, &mut da);
                    } else {
                        gemm(m, n, k, g, false, self.value(b), !tb, 0.0, &mut da);
                    }
                    self.accumulate_owned(a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    if tb {
                        gemm(n, m, k, g, true, self.value(a), ta, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, self.value(a), !ta, g, false, 0.0, &mut db);
                    }
                    self.accumulate_owned(b, db);
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                self.accumulate(*a, g);
                if self.requires_grad(*b) {
                    let mut db = self.reduce_bcast(out_shape, *bcast, g);
                    if sign < 0.0 {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate_owned(*b, db);
                }
            }
            Op::Mul { a, b, bcast } => {
                let (a, b, bc) = (*a, *b, *bcast);
                if self.requires_grad(a) {
                    let gb = {
                        let mut tmp = Vec::with_capacity(g.len());
                        let bv = self.value(b);
                        for r in 0..out_shape.rows {
                            for c in 0..out_shape.cols {
                                let bi = match bc {
                                    Bcast::Full => r * out_shape.cols + c,
                                    Bcast::Row => c,
                                    Bcast::Col => r,
                                    Bcast::Scalar => 0,
                                };
                                tmp.push(g[r * out_shape.cols + c] * bv[bi]);
                            }
                        }
                        tmp
                    };
                    self.accumulate_owned(a, gb);
                }
                if self.requires_grad(b) {
                    let ga: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    let db = self.reduce_bcast(out_shape, bc, &ga);
                    self.accumulate_owned(b, db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate_owned(*a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].data;
                let da: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate_owned(*a, da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate_owned(*a, da);
            }
            Op::Softmax { a, axis } => {
                let y = &self.nodes[i].data;
                let s = out_shape;
                let mut da = vec![0.0; g.len()];
                match axis {
                    Axis::Cols => {
                        for r in 0..s.rows {
                            let span = r * s.cols..(r + 1) * s.cols;
                            let dotp = kernels::dot(&g[span.clone()], &y[span.clone()]);
                            for j in span {
                                da[j] = y[j] * (g[j] - dotp);
                            }
                        }
                    }
                    Axis::Rows => {
                        for c in 0..s.cols {
                            let dotp: f64 = (0..s.rows).map(|r| g[r * s.cols + c] * y[r * s.cols + c]).sum();
                            for r in 0..s.rows {
                                let j = r * s.cols + c;
                                da[j] = y[j] * (g[j] - dotp);
                            }
                        }
                    }
                }
                self.accumulate_owned(*a, da);
            }
            Op::Conv1d { x, w, bias, width, cols } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (n, kd, d_out) = (sx.rows, sw.rows, sw.cols);
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let db = self.reduce_bcast(out_shape, Bcast::Row, g);
                        self.accumulate_owned(*b, db);
                    }
                }
                if self.requires_grad(*w) {
                    if let Some(dw) = self.grad_buf(*w) {
                        gemm(kd, n, d_out, cols, true, g, false, 1.0, dw);
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![0.0; n * kd];
                    gemm(n, d_out, kd, g, false, self.value(*w), true, 0.0, &mut dcols);
                    let dx = col2im(&dcols, sx, *width);
                    self.accumulate_owned(*x, dx);
                }
            }
            Op::MaxSeq { a, idx } => {
                let cols = self.shape(*a).cols;
                if let Some(da) = self.grad_buf(*a) {
                    for (c, &r) in idx.iter().enumerate() {
                        da[r * cols + c] += g[c];
                    }
                }
            }
            Op::Top2Seq { a, first, second } => {
                let cols = self.shape(*a).cols;
                if let Some(da) = self.grad_buf(*a) {
                    for c in 0..cols {
                        da[first[c] * cols + c] += g[c];
                        da[second[c] * cols + c] += g[cols + c];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    match axis {
                        Axis::Rows => {
                            let piece = g[offset..offset + s.numel()].to_vec();
                            offset += s.numel();
                            self.accumulate_owned(p, piece);
                        }
                        Axis::Cols => {
                            if self.requires_grad(p) {
                                let mut piece = Vec::with_capacity(s.numel());
                                for r in 0..s.rows {
                                    let base = r * out_shape.cols + offset;
                                    piece.extend_from_slice(&g[base..base + s.cols]);
                                }
                                self.accumulate_owned(p, piece);
                            }
                            offset += s.cols;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let cols = self.shape(*a).cols;
                let w = out_shape.cols;
                if let Some(da) = self.grad_buf(*a) {
                    for r in 0..out_shape.rows {
                        let dst = &mut da[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Transpose(a) => {
                let s = out_shape;
                let mut da = vec![0.0; g.len()];
                for r in 0..s.rows {
                    for c in 0..s.cols {
                        da[c * s.rows + r] = g[r * s.cols + c];
                    }
                }
                self.accumulate_owned(*a, da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate_owned(*a, da);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let cols = self.shape(*logits).cols;
                let up = g[0];
                let mut da = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for c in 0..cols {
                            da[r * cols + c] = up * probs[r * cols + c];
                        }
                        da[r * cols + t] -= up;
                    }
                }
                self.accumulate_owned(*logits, da);
            }
            Op::Gather { table, ids } => {
                let cols = self.shape(*table).cols;
                if let Some(dt) = self.grad_buf(*table) {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(row) = id {
                            kernels::axpy(1.0, &g[r * cols..(r + 1) * cols], &mut dt[row * cols..(row + 1) * cols]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.shape(*a).numel();
                self.accumulate_owned(*a, vec![g[0]; n]);
            }
        }
    }

    /// Adds the gradients held by parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut GradStore) {
        let mut pairs: Vec<_> = self.param_nodes.iter().collect();
        pairs.sort();
        for (pid, node) in pairs {
            if let Some(g) = &self.nodes[node.0].grad {
                store.accumulate(*pid, g);
            }
        }
    }

    pub fn param_grads(&self) -> GradStore {
        let mut store = GradStore::new();
        self.accumulate_param_grads(&mut store);
        store
    }
}

fn im2col(x: &[f64], sx: Shape, width: usize) -> Vec<f64> {
    let (n, d) = (sx.rows, sx.cols);
    let left = (width - 1) / 2;
    let mut cols = vec![0.0; n * width * d];
    for t in 0..n {
        for j in 0..width {
            let src = t as isize + j as isize - left as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * width * d + j * d;
            cols[dst..dst + d].copy_from_slice(&x[src * d..(src + 1) * d]);
        }
    }
    cols
}

fn col2im(dcols: &[f64], sx: Shape, width: usize) -> Vec<f64> {
    let (n, d) = (sx.rows, sx.cols);
    let left = (width - 1) / 2;
    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..width {
            let src = t as isize + j as isize - left as isize;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            let off = t * width * d + j * d;
            kernels::axpy(1.0, &dcols[off..off + d], &mut dx[src * d..(src + 1) * d]);
        }
    }
    dx
}
