use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::tensor::Tensor;
use super::Error;

pub type NodeId = usize;

/// Feeds for placeholder leaves, keyed by placeholder name.
pub type Feeds = HashMap<String, Tensor>;

/// Named gradients, one per `requires_grad` parameter leaf.
pub type GradMap = IndexMap<String, Tensor>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Cross-entropy targets: hard class indices, or a second input node holding
/// a target distribution per row.
#[derive(Debug, Clone)]
pub enum Targets {
    Hard(Vec<usize>),
    Soft,
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Placeholder,
    Param,
    Constant,
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    EmbedLookup { indices: Vec<usize> },
    Softmax { axis: usize },
    LayerNorm,
    Gelu,
    Dropout { rate: f64 },
    CrossEntropy { targets: Targets },
    Reshape,
    Transpose,
    Mean,
    MaskFill { mask: Arc<Vec<bool>>, value: f64 },
}

impl OpKind {
    fn label(&self) -> &'static str {
        match self {
            OpKind::Placeholder => "placeholder",
            OpKind::Param => "param",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::EmbedLookup { .. } => "embed_lookup",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Dropout { .. } => "dropout",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::MaskFill { .. } => "mask_fill",
        }
    }
}

struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// Leaf value for Param and Constant nodes.
    value: Option<Tensor>,
    /// Param/placeholder name.
    name: Option<String>,
}

/// A topologically ordered record of operations. Nodes can only reference
/// earlier nodes, so insertion order is a valid evaluation order and gradient
/// accumulation order is fixed.
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    dropout_masks: Vec<Option<Vec<f64>>>,
    param_ids: IndexMap<String, NodeId>,
    placeholder_ids: IndexMap<String, NodeId>,
    training: bool,
    seed: u64,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            dropout_masks: Vec::new(),
            param_ids: IndexMap::new(),
            placeholder_ids: IndexMap::new(),
            training: false,
            seed,
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id].name {
            Some(n) => format!("{}@{} ({})", self.nodes[id].op.label(), id, n),
            None => format!("{}@{}", self.nodes[id].op.label(), id),
        }
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.values.push(None);
        self.dropout_masks.push(None);
        id
    }

    fn shape_err(&self, op: &OpKind, detail: String) -> Error {
        Error::ShapeMismatch {
            node: format!("{}@{}", op.label(), self.nodes.len()),
            detail,
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn placeholder(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, Error> {
        if self.placeholder_ids.contains_key(name) {
            return Err(Error::DuplicateLeaf(name.to_string()));
        }
        let id = self.push(Node {
            op: OpKind::Placeholder,
            inputs: vec![],
            shape: shape.to_vec(),
            value: None,
            name: Some(name.to_string()),
        });
        self.placeholder_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a named trainable leaf. `requires_grad` is forced on.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, Error> {
        if self.param_ids.contains_key(name) {
            return Err(Error::DuplicateLeaf(name.to_string()));
        }
        let shape = value.shape.clone();
        let id = self.push(Node {
            op: OpKind::Param,
            inputs: vec![],
            shape,
            value: Some(value.with_grad()),
            name: Some(name.to_string()),
        });
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape.clone();
        self.push(Node {
            op: OpKind::Constant,
            inputs: vec![],
            shape,
            value: Some(value),
            name: None,
        })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.param_ids.keys()
    }

    pub fn param_node_id(&self, name: &str) -> Option<NodeId> {
        self.param_ids.get(name).copied()
    }

    /// Register a parameter leaf holding a copy of a stored tensor.
    /// Repeat calls for the same name return the existing node.
    pub fn param_from(
        &mut self,
        store: &super::ParamStore,
        name: &str,
    ) -> Result<NodeId, Error> {
        if let Some(id) = self.param_node_id(name) {
            return Ok(id);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.param(name, t.clone())
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        let id = *self.param_ids.get(name)?;
        self.nodes[id].value.as_ref()
    }

    pub fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = *self.param_ids.get(name)?;
        self.nodes[id].value.as_mut()
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err(
                &OpKind::MatMul,
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Node {
            op: OpKind::MatMul,
            inputs: vec![a, b],
            shape,
            value: None,
            name: None,
        }))
    }

    /// Elementwise addition; also accepts a row vector bias against a matrix,
    /// or a scalar on either side.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let shape = if sa == sb {
            sa
        } else if nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else if sa.len() == 2 && *sb.last().unwrap() == sa[1] && nb == sa[1] {
            sa
        } else {
            return Err(self.shape_err(&OpKind::Add, format!("cannot add {:?} and {:?}", sa, sb)));
        };
        Ok(self.push(Node {
            op: OpKind::Add,
            inputs: vec![a, b],
            shape,
            value: None,
            name: None,
        }))
    }

    /// Elementwise product; a scalar on either side broadcasts.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let shape = if sa == sb {
            sa
        } else if nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else {
            return Err(self.shape_err(
                &OpKind::Mul,
                format!("cannot multiply elementwise {:?} and {:?}", sa, sb),
            ));
        };
        Ok(self.push(Node {
            op: OpKind::Mul,
            inputs: vec![a, b],
            shape,
            value: None,
            name: None,
        }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, Error> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, Error> {
        if inputs.is_empty() || axis > 1 {
            return Err(self.shape_err(
                &OpKind::Concat { axis },
                "concat needs at least one input and axis 0 or 1".to_string(),
            ));
        }
        let first = self.nodes[inputs[0]].shape.clone();
        if first.len() != 2 && !(first.len() == 1 && axis == 0) {
            return Err(self.shape_err(
                &OpKind::Concat { axis },
                format!("unsupported operand shape {:?}", first),
            ));
        }
        let mut shape = if first.len() == 1 {
            vec![first[0]]
        } else {
            first.clone()
        };
        let mut total = shape[axis.min(shape.len() - 1)];
        for &i in &inputs[1..] {
            let s = &self.nodes[i].shape;
            if s.len() != first.len() {
                return Err(self.shape_err(
                    &OpKind::Concat { axis },
                    format!("rank mismatch {:?} vs {:?}", first, s),
                ));
            }
            let fixed = 1 - axis;
            if s.len() == 2 && s[fixed] != first[fixed] {
                return Err(self.shape_err(
                    &OpKind::Concat { axis },
                    format!("axis {} sizes differ: {:?} vs {:?}", fixed, first, s),
                ));
            }
            total += s[axis.min(s.len() - 1)];
        }
        let ax = axis.min(shape.len() - 1);
        shape[ax] = total;
        Ok(self.push(Node {
            op: OpKind::Concat { axis },
            inputs: inputs.to_vec(),
            shape,
            value: None,
            name: None,
        }))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        let op = OpKind::Slice { axis, start, len };
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(self.shape_err(
                &op,
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, sx),
            ));
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(Node {
            op,
            inputs: vec![x],
            shape,
            value: None,
            name: None,
        }))
    }

    /// Gather rows of a `[V, H]` table. Indices are fixed per graph build.
    pub fn embed_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, Error> {
        let st = self.nodes[table].shape.clone();
        if st.len() != 2 {
            return Err(self.shape_err(
                &OpKind::EmbedLookup {
                    indices: indices.to_vec(),
                },
                format!("table must be 2-D, got {:?}", st),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: st[0],
                node: format!("embed_lookup of {}", self.node_label(table)),
            });
        }
        let shape = vec![indices.len(), st[1]];
        Ok(self.push(Node {
            op: OpKind::EmbedLookup {
                indices: indices.to_vec(),
            },
            inputs: vec![table],
            shape,
            value: None,
            name: None,
        }))
    }

    /// Softmax over rows of a matrix (axis 1) or over a vector (axis 0).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        let ok = (sx.len() == 2 && axis == 1) || (sx.len() == 1 && axis == 0);
        if !ok {
            return Err(self.shape_err(
                &OpKind::Softmax { axis },
                format!("axis {} unsupported for shape {:?}", axis, sx),
            ));
        }
        Ok(self.push(Node {
            op: OpKind::Softmax { axis },
            inputs: vec![x],
            shape: sx,
            value: None,
            name: None,
        }))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        let cols = *sx.last().unwrap();
        for (nm, p) in [("gamma", gamma), ("beta", beta)] {
            let sp = &self.nodes[p].shape;
            if sp.iter().product::<usize>() != cols {
                return Err(self.shape_err(
                    &OpKind::LayerNorm,
                    format!("{} shape {:?} does not match row width {}", nm, sp, cols),
                ));
            }
        }
        Ok(self.push(Node {
            op: OpKind::LayerNorm,
            inputs: vec![x, gamma, beta],
            shape: sx,
            value: None,
            name: None,
        }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Node {
            op: OpKind::Gelu,
            inputs: vec![x],
            shape,
            value: None,
            name: None,
        })
    }

    /// Inverted dropout: active only in training mode, identity otherwise.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, Error> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::BadDropoutRate(rate));
        }
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Node {
            op: OpKind::Dropout { rate },
            inputs: vec![x],
            shape,
            value: None,
            name: None,
        }))
    }

    /// Mean cross-entropy between rows of logits and hard class indices.
    /// Softmax is fused for stability; the output is a scalar.
    pub fn cross_entropy_hard(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, Error> {
        let sl = self.nodes[logits].shape.clone();
        let op = OpKind::CrossEntropy {
            targets: Targets::Hard(targets.to_vec()),
        };
        if sl.len() != 2 || sl[0] != targets.len() || targets.is_empty() {
            return Err(self.shape_err(
                &op,
                format!("logits {:?} vs {} targets", sl, targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= sl[1]) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: sl[1],
                node: "cross_entropy targets".to_string(),
            });
        }
        Ok(self.push(Node {
            op,
            inputs: vec![logits],
            shape: vec![1],
            value: None,
            name: None,
        }))
    }

    /// Mean cross-entropy of logits against a target distribution node.
    /// Gradient flows into both the logits and the target distribution.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, Error> {
        let (sl, st) = (
            self.nodes[logits].shape.clone(),
            self.nodes[target].shape.clone(),
        );
        let op = OpKind::CrossEntropy {
            targets: Targets::Soft,
        };
        if sl.len() != 2 || sl != st {
            return Err(self.shape_err(
                &op,
                format!("logits {:?} vs target distribution {:?}", sl, st),
            ));
        }
        Ok(self.push(Node {
            op,
            inputs: vec![logits, target],
            shape: vec![1],
            value: None,
            name: None,
        }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        let n: usize = sx.iter().product();
        let m: usize = shape.iter().product();
        if n != m {
            return Err(self.shape_err(
                &OpKind::Reshape,
                format!("cannot reshape {:?} into {:?}", sx, shape),
            ));
        }
        Ok(self.push(Node {
            op: OpKind::Reshape,
            inputs: vec![x],
            shape: shape.to_vec(),
            value: None,
            name: None,
        }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        if sx.len() != 2 {
            return Err(self.shape_err(
                &OpKind::Transpose,
                format!("transpose needs a matrix, got {:?}", sx),
            ));
        }
        Ok(self.push(Node {
            op: OpKind::Transpose,
            inputs: vec![x],
            shape: vec![sx[1], sx[0]],
            value: None,
            name: None,
        }))
    }

    /// Mean over all entries, producing a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Node {
            op: OpKind::Mean,
            inputs: vec![x],
            shape: vec![1],
            value: None,
            name: None,
        })
    }

    /// Replace entries where `mask` is true with `value`.
    pub fn mask_fill(
        &mut self,
        x: NodeId,
        mask: Arc<Vec<bool>>,
        value: f64,
    ) -> Result<NodeId, Error> {
        let sx = self.nodes[x].shape.clone();
        let n: usize = sx.iter().product();
        if mask.len() != n {
            return Err(self.shape_err(
                &OpKind::MaskFill { mask: mask.clone(), value },
                format!("mask length {} vs {} entries", mask.len(), n),
            ));
        }
        Ok(self.push(Node {
            op: OpKind::MaskFill { mask, value },
            inputs: vec![x],
            shape: sx,
            value: None,
            name: None,
        }))
    }

    // ── Execution ───────────────────────────────────────────────────

    /// Drop all cached forward values and gradients, keeping leaf values.
    pub fn invalidate(&mut self) {
        for v in self.values.iter_mut() {
            *v = None;
        }
        for m in self.dropout_masks.iter_mut() {
            *m = None;
        }
    }

    pub fn has_stochastic_dropout(&self) -> bool {
        self.training
            && self
                .nodes
                .iter()
                .any(|n| matches!(n.op, OpKind::Dropout { rate } if rate > 0.0))
    }

    fn ancestors(&self, out: NodeId) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![out];
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            stack.extend_from_slice(&self.nodes[id].inputs);
        }
        needed
    }

    /// Evaluate `out` and every node it depends on, in topological order.
    /// Intermediate values stay cached until `invalidate`.
    pub fn forward(&mut self, out: NodeId, feeds: &Feeds) -> Result<Tensor, Error> {
        if out >= self.nodes.len() {
            return Err(Error::UnknownNode(out));
        }
        if let Some(v) = &self.values[out] {
            return Ok(v.clone());
        }
        // Dropout draws restart from the seed each pass: forward is a pure
        // function of (graph, leaf values, feeds, seed).
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let needed = self.ancestors(out);
        for id in 0..=out {
            if !needed[id] || self.values[id].is_some() {
                continue;
            }
            let value = self.eval_node(id, feeds, &mut rng)?;
            #[cfg(debug_assertions)]
            {
                if value.has_non_finite() {
                    return Err(Error::NonFinite {
                        node: self.node_label(id),
                    });
                }
            }
            self.values[id] = Some(value);
        }
        Ok(self.values[out].clone().unwrap())
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        feeds: &Feeds,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, Error> {
        let ins: Vec<NodeId> = self.nodes[id].inputs.clone();
        let val = |i: usize| -> &Tensor { self.values[ins[i]].as_ref().unwrap() };
        let node = &self.nodes[id];
        let out = match &node.op {
            OpKind::Placeholder => {
                let name = node.name.as_deref().unwrap();
                let fed = feeds
                    .get(name)
                    .ok_or_else(|| Error::MissingFeed(name.to_string()))?;
                if fed.shape != node.shape {
                    return Err(Error::ShapeMismatch {
                        node: self.node_label(id),
                        detail: format!("fed {:?}, declared {:?}", fed.shape, node.shape),
                    });
                }
                fed.clone()
            }
            OpKind::Param | OpKind::Constant => node.value.clone().unwrap(),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                Tensor {
                    shape: vec![m, n],
                    data: ops::matmul_nn(&a.data, &b.data, m, k, n),
                    requires_grad: false,
                }
            }
            OpKind::Add => {
                let (a, b) = (val(0), val(1));
                let mut out = Tensor::zeros(&node.shape);
                if a.shape == b.shape {
                    for (o, (&x, &y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
                        *o = x + y;
                    }
                } else if b.numel() == 1 {
                    let c = b.data[0];
                    for (o, &x) in out.data.iter_mut().zip(&a.data) {
                        *o = x + c;
                    }
                } else if a.numel() == 1 {
                    let c = a.data[0];
                    for (o, &x) in out.data.iter_mut().zip(&b.data) {
                        *o = x + c;
                    }
                } else {
                    // row-broadcast bias
                    let cols = a.shape[1];
                    for r in 0..a.shape[0] {
                        for c in 0..cols {
                            out.data[r * cols + c] = a.data[r * cols + c] + b.data[c];
                        }
                    }
                }
                out
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let mut out = Tensor::zeros(&node.shape);
                if a.shape == b.shape {
                    for (o, (&x, &y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
                        *o = x * y;
                    }
                } else if b.numel() == 1 {
                    let c = b.data[0];
                    for (o, &x) in out.data.iter_mut().zip(&a.data) {
                        *o = x * c;
                    }
                } else {
                    let c = a.data[0];
                    for (o, &x) in out.data.iter_mut().zip(&b.data) {
                        *o = x * c;
                    }
                }
                out
            }
            OpKind::Concat { axis } => {
                let axis = *axis;
                let mut out = Tensor::zeros(&node.shape);
                if axis == 0 || node.shape.len() == 1 {
                    let mut off = 0;
                    for i in 0..ins.len() {
                        let t = val(i);
                        out.data[off..off + t.numel()].copy_from_slice(&t.data);
                        off += t.numel();
                    }
                } else {
                    let rows = node.shape[0];
                    let out_cols = node.shape[1];
                    let mut col_off = 0;
                    for i in 0..ins.len() {
                        let t = val(i);
                        let c = t.shape[1];
                        for r in 0..rows {
                            out.data[r * out_cols + col_off..r * out_cols + col_off + c]
                                .copy_from_slice(&t.data[r * c..(r + 1) * c]);
                        }
                        col_off += c;
                    }
                }
                out
            }
            OpKind::Slice { axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let x = val(0);
                let mut out = Tensor::zeros(&node.shape);
                if x.shape.len() == 1 || axis == 0 {
                    let cols = x.cols();
                    out.data
                        .copy_from_slice(&x.data[start * cols..(start + len) * cols]);
                } else {
                    let cols = x.shape[1];
                    for r in 0..x.shape[0] {
                        out.data[r * len..(r + 1) * len]
                            .copy_from_slice(&x.data[r * cols + start..r * cols + start + len]);
                    }
                }
                out
            }
            OpKind::EmbedLookup { indices } => {
                let table = val(0);
                let h = table.shape[1];
                let mut out = Tensor::zeros(&[indices.len(), h]);
                for (r, &ix) in indices.iter().enumerate() {
                    out.data[r * h..(r + 1) * h].copy_from_slice(&table.data[ix * h..(ix + 1) * h]);
                }
                out
            }
            OpKind::Softmax { .. } => {
                let x = val(0);
                let cols = x.cols();
                let mut out = Tensor::zeros(&node.shape);
                for r in 0..x.rows() {
                    ops::softmax_slice(
                        &x.data[r * cols..(r + 1) * cols],
                        &mut out.data[r * cols..(r + 1) * cols],
                    );
                }
                out
            }
            OpKind::LayerNorm => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                let cols = x.cols();
                let mut out = Tensor::zeros(&node.shape);
                for r in 0..x.rows() {
                    let row = &x.data[r * cols..(r + 1) * cols];
                    let mu = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for c in 0..cols {
                        out.data[r * cols + c] =
                            (row[c] - mu) * inv * gamma.data[c] + beta.data[c];
                    }
                }
                out
            }
            OpKind::Gelu => {
                let x = val(0);
                Tensor {
                    shape: node.shape.clone(),
                    data: x.data.iter().map(|&v| ops::gelu(v)).collect(),
                    requires_grad: false,
                }
            }
            OpKind::Dropout { rate } => {
                let rate = *rate;
                let x = val(0);
                if self.training && rate > 0.0 {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..x.numel())
                        .map(|_| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    self.dropout_masks[id] = Some(mask);
                    Tensor {
                        shape: node.shape.clone(),
                        data,
                        requires_grad: false,
                    }
                } else {
                    self.dropout_masks[id] = None;
                    val(0).clone()
                }
            }
            OpKind::CrossEntropy { targets } => {
                let z = val(0);
                let (rows, cols) = (z.shape[0], z.shape[1]);
                let mut total = 0.0;
                match targets {
                    Targets::Hard(ys) => {
                        for (r, &y) in ys.iter().enumerate() {
                            let row = &z.data[r * cols..(r + 1) * cols];
                            total += ops::log_sum_exp(row) - row[y];
                        }
                    }
                    Targets::Soft => {
                        let t = val(1);
                        for r in 0..rows {
                            let row = &z.data[r * cols..(r + 1) * cols];
                            let lse = ops::log_sum_exp(row);
                            for c in 0..cols {
                                total += t.data[r * cols + c] * (lse - row[c]);
                            }
                        }
                    }
                }
                Tensor::scalar(total / rows as f64)
            }
            OpKind::Reshape => Tensor {
                shape: node.shape.clone(),
                data: val(0).data.clone(),
                requires_grad: false,
            },
            OpKind::Transpose => {
                let x = val(0);
                let (m, n) = (x.shape[0], x.shape[1]);
                let mut out = Tensor::zeros(&[n, m]);
                for r in 0..m {
                    for c in 0..n {
                        out.data[c * m + r] = x.data[r * n + c];
                    }
                }
                out
            }
            OpKind::Mean => {
                let x = val(0);
                Tensor::scalar(x.data.iter().sum::<f64>() / x.numel() as f64)
            }
            OpKind::MaskFill { mask, value } => {
                let x = val(0);
                let data = x
                    .data
                    .iter()
                    .zip(mask.iter())
                    .map(|(&v, &m)| if m { *value } else { v })
                    .collect();
                Tensor {
                    shape: node.shape.clone(),
                    data,
                    requires_grad: false,
                }
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Requires a prior `forward` covering
    /// the loss. Fan-out accumulates by summation in reverse topological
    /// order; returns one gradient per parameter, zeros for parameters the
    /// loss does not reach.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap, Error> {
        if loss >= self.nodes.len() {
            return Err(Error::UnknownNode(loss));
        }
        let loss_val = self.values[loss]
            .as_ref()
            .ok_or_else(|| Error::NotForwarded(self.node_label(loss)))?;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape.clone()));
        }

        // Gradients only flow where a parameter sits upstream.
        let mut needs = vec![false; self.nodes.len()];
        for (_, &pid) in &self.param_ids {
            needs[pid] = true;
        }
        for id in 0..self.nodes.len() {
            if !self.nodes[id].inputs.is_empty() {
                needs[id] = self.nodes[id].inputs.iter().any(|&i| needs[i]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !needs[id] {
                continue;
            }
            if self.nodes[id].inputs.is_empty() {
                continue;
            }
            let g = grads[id].take().unwrap();
            let ins = self.nodes[id].inputs.clone();
            let input_grads = self.grad_node(id, &g)?;
            grads[id] = Some(g);
            for (slot, maybe_grad) in ins.iter().zip(input_grads) {
                let Some(delta) = maybe_grad else { continue };
                if !needs[*slot] {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                            *a += d;
                        }
                    }
                    None => grads[*slot] = Some(delta),
                }
            }
        }

        let mut out = GradMap::new();
        for (name, &pid) in &self.param_ids {
            let g = grads[pid]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[pid].shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Per-input gradients of one node given the upstream gradient.
    fn grad_node(&self, id: NodeId, g: &Tensor) -> Result<Vec<Option<Tensor>>, Error> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| -> &Tensor { self.values[ins[i]].as_ref().unwrap() };
        let out_val = || -> &Tensor { self.values[id].as_ref().unwrap() };
        let res = match &node.op {
            OpKind::Placeholder | OpKind::Param | OpKind::Constant => vec![],
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = Tensor {
                    shape: a.shape.clone(),
                    data: ops::matmul_nt(&g.data, &b.data, m, n, k),
                    requires_grad: false,
                };
                let db = Tensor {
                    shape: b.shape.clone(),
                    data: ops::matmul_tn(&a.data, &g.data, k, m, n),
                    requires_grad: false,
                };
                vec![Some(da), Some(db)]
            }
            OpKind::Add => {
                let (a, b) = (val(0), val(1));
                let da = self.reduce_like(g, a);
                let db = self.reduce_like(g, b);
                vec![Some(da), Some(db)]
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let ga = self.mul_bcast(g, b, a);
                let gb = self.mul_bcast(g, a, b);
                vec![Some(ga), Some(gb)]
            }
            OpKind::Concat { axis } => {
                let mut out = Vec::with_capacity(ins.len());
                if *axis == 0 || node.shape.len() == 1 {
                    let mut off = 0;
                    for i in 0..ins.len() {
                        let t = val(i);
                        let mut d = Tensor::zeros(&t.shape);
                        d.data.copy_from_slice(&g.data[off..off + t.numel()]);
                        off += t.numel();
                        out.push(Some(d));
                    }
                } else {
                    let rows = node.shape[0];
                    let out_cols = node.shape[1];
                    let mut col_off = 0;
                    for i in 0..ins.len() {
                        let t = val(i);
                        let c = t.shape[1];
                        let mut d = Tensor::zeros(&t.shape);
                        for r in 0..rows {
                            d.data[r * c..(r + 1) * c].copy_from_slice(
                                &g.data[r * out_cols + col_off..r * out_cols + col_off + c],
                            );
                        }
                        col_off += c;
                        out.push(Some(d));
                    }
                }
                out
            }
            OpKind::Slice { axis, start, len } => {
                let x = val(0);
                let mut d = Tensor::zeros(&x.shape);
                if x.shape.len() == 1 || *axis == 0 {
                    let cols = x.cols();
                    d.data[*start * cols..(*start + *len) * cols].copy_from_slice(&g.data);
                } else {
                    let cols = x.shape[1];
                    for r in 0..x.shape[0] {
                        d.data[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                }
                vec![Some(d)]
            }
            OpKind::EmbedLookup { indices } => {
                let table = val(0);
                let h = table.shape[1];
                let mut d = Tensor::zeros(&table.shape);
                for (r, &ix) in indices.iter().enumerate() {
                    for c in 0..h {
                        d.data[ix * h + c] += g.data[r * h + c];
                    }
                }
                vec![Some(d)]
            }
            OpKind::Softmax { .. } => {
                let y = out_val();
                let cols = y.cols();
                let mut d = Tensor::zeros(&y.shape);
                for r in 0..y.rows() {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d.data[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(d)]
            }
            OpKind::LayerNorm => {
                let (x, gamma) = (val(0), val(1));
                let cols = x.cols();
                let rows = x.rows();
                let mut dx = Tensor::zeros(&x.shape);
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &x.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let mu = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let gg: Vec<f64> = (0..cols).map(|c| gr[c] * gamma.data[c]).collect();
                    let mean_gg = gg.iter().sum::<f64>() / cols as f64;
                    let mean_ggx = gg
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        dx.data[r * cols + c] = inv * (gg[c] - mean_gg - xhat[c] * mean_ggx);
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                }
                let gshape = self.nodes[ins[1]].shape.clone();
                let bshape = self.nodes[ins[2]].shape.clone();
                vec![
                    Some(dx),
                    Some(Tensor {
                        shape: gshape,
                        data: dgamma,
                        requires_grad: false,
                    }),
                    Some(Tensor {
                        shape: bshape,
                        data: dbeta,
                        requires_grad: false,
                    }),
                ]
            }
            OpKind::Gelu => {
                let x = val(0);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv * ops::gelu_prime(v))
                    .collect();
                vec![Some(Tensor {
                    shape: x.shape.clone(),
                    data,
                    requires_grad: false,
                })]
            }
            OpKind::Dropout { .. } => match &self.dropout_masks[id] {
                Some(mask) => {
                    let data = g.data.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    vec![Some(Tensor {
                        shape: g.shape.clone(),
                        data,
                        requires_grad: false,
                    })]
                }
                None => vec![Some(g.clone())],
            },
            OpKind::CrossEntropy { targets } => {
                let z = val(0);
                let (rows, cols) = (z.shape[0], z.shape[1]);
                let scale = g.data[0] / rows as f64;
                let mut dz = Tensor::zeros(&z.shape);
                match targets {
                    Targets::Hard(ys) => {
                        for (r, &y) in ys.iter().enumerate() {
                            let row = &z.data[r * cols..(r + 1) * cols];
                            ops::softmax_slice(row, &mut dz.data[r * cols..(r + 1) * cols]);
                            for c in 0..cols {
                                let delta = if c == y { 1.0 } else { 0.0 };
                                dz.data[r * cols + c] = (dz.data[r * cols + c] - delta) * scale;
                            }
                        }
                        vec![Some(dz)]
                    }
                    Targets::Soft => {
                        let t = val(1);
                        let mut dt = Tensor::zeros(&t.shape);
                        let mut p = vec![0.0; cols];
                        for r in 0..rows {
                            let row = &z.data[r * cols..(r + 1) * cols];
                            ops::softmax_slice(row, &mut p);
                            let lse = ops::log_sum_exp(row);
                            let tsum: f64 = t.data[r * cols..(r + 1) * cols].iter().sum();
                            for c in 0..cols {
                                dz.data[r * cols + c] =
                                    (p[c] * tsum - t.data[r * cols + c]) * scale;
                                dt.data[r * cols + c] = (lse - row[c]) * scale;
                            }
                        }
                        vec![Some(dz), Some(dt)]
                    }
                }
            }
            OpKind::Reshape => {
                let x = val(0);
                vec![Some(Tensor {
                    shape: x.shape.clone(),
                    data: g.data.clone(),
                    requires_grad: false,
                })]
            }
            OpKind::Transpose => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let mut d = Tensor::zeros(&[m, n]);
                for r in 0..n {
                    for c in 0..m {
                        d.data[c * n + r] = g.data[r * m + c];
                    }
                }
                vec![Some(d)]
            }
            OpKind::Mean => {
                let x = val(0);
                let gv = g.data[0] / x.numel() as f64;
                vec![Some(Tensor {
                    shape: x.shape.clone(),
                    data: vec![gv; x.numel()],
                    requires_grad: false,
                })]
            }
            OpKind::MaskFill { mask, .. } => {
                let data = g
                    .data
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect();
                vec![Some(Tensor {
                    shape: g.shape.clone(),
                    data,
                    requires_grad: false,
                })]
            }
        };
        Ok(res)
    }

    /// Sum `g` down to the shape of `target` (for broadcast add).
    fn reduce_like(&self, g: &Tensor, target: &Tensor) -> Tensor {
        if g.shape == target.shape {
            return g.clone();
        }
        if target.numel() == 1 {
            return Tensor::scalar(g.data.iter().sum());
        }
        // column sums of a [m,n] gradient onto a length-n bias
        let cols = target.numel();
        let mut out = Tensor::zeros(&target.shape);
        for (i, &gv) in g.data.iter().enumerate() {
            out.data[i % cols] += gv;
        }
        out
    }

    /// g * other, reduced to the shape of `target` (for broadcast mul).
    fn mul_bcast(&self, g: &Tensor, other: &Tensor, target: &Tensor) -> Tensor {
        if target.shape == g.shape {
            // target is the full-size operand
            if other.numel() == 1 {
                let c = other.data[0];
                return Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&v| v * c).collect(),
                    requires_grad: false,
                };
            }
            let data = g.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
            return Tensor {
                shape: g.shape.clone(),
                data,
                requires_grad: false,
            };
        }
        // target is the scalar operand
        let dot: f64 = g.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum();
        Tensor {
            shape: target.shape.clone(),
            data: vec![dot],
            requires_grad: false,
        }
    }
}
