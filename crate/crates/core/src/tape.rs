//! Reverse-mode differentiation over a recorded computation tape.
//!
//! Every primitive call evaluates its output immediately and appends a node
//! to the tape. Nodes only refer to earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through [`Tape::bind`]. Trainable bindings are
//! reported by name in the resulting [`Gradients`]; frozen bindings are
//! constants and receive no gradient.
//!
//! ```
//! use pstory::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
//!
//! let mut tape = Tape::new();
//! let params = tape.bind(&store, true);
//! let w = params.get("w").unwrap();
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//!
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param("w").unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Row(NodeId, usize),
    MaxOver(Vec<NodeId>),
    Softmax(NodeId),
    SoftmaxCe(NodeId, usize),
    SigmoidBce(NodeId, f64),
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Name → node map produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node that required one.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.compute(&op)?;
        Ok(self.push(op, value))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A leaf whose gradient is tracked but which is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Overwrites the value of a leaf. Call [`Tape::replay`] afterwards to
    /// refresh dependent nodes.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dim("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Registers every parameter in `store` as a leaf, in name order.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Binding {
        let mut ids = HashMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let op = if trainable { Op::Param(name.clone()) } else { Op::Leaf };
            let id = self.push(op, value.clone());
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }

    /// Recomputes every node in recorded order, reloading parameter values
    /// from `store`. The control flow of the original recording is reused.
    pub fn replay(&mut self, store: &ParamStore) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::Param(name) => {
                    let v = store.get(name)?;
                    if v.shape() != self.nodes[i].value.shape() {
                        return Err(Error::dim("replay", self.nodes[i].value.shape(), v.shape()));
                    }
                    v.clone()
                }
                op => {
                    let op = op.clone();
                    self.compute(&op)?
                }
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    // ---- primitives ----

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec(w, x))
    }

    /// `xᵀ W` for a vector `x` of length `rows(W)`.
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Op::VecMat(x, w))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.record(Op::Scale(a, c)).expect("scale is total")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(Op::Slice(a, start, len))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Tanh(a)).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Sigmoid(a)).expect("sigmoid is total")
    }

    /// Row `index` of a matrix.
    pub fn row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        self.record(Op::Row(table, index))
    }

    /// Elementwise maximum across equally shaped vectors. Ties go to the
    /// earliest input.
    pub fn max_over(&mut self, items: &[NodeId]) -> Result<NodeId> {
        self.record(Op::MaxOver(items.to_vec()))
    }

    pub fn softmax(&mut self, logits: NodeId) -> NodeId {
        self.record(Op::Softmax(logits)).expect("softmax is total")
    }

    /// `-log softmax(logits)[target]`.
    pub fn softmax_ce(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.record(Op::SoftmaxCe(logits, target))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`.
    pub fn sigmoid_bce(&mut self, logit: NodeId, label: f64) -> Result<NodeId> {
        self.record(Op::SigmoidBce(logit, label))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Sum(a)).expect("sum is total")
    }

    pub fn add_n(&mut self, items: &[NodeId]) -> Result<NodeId> {
        self.record(Op::AddN(items.to_vec()))
    }

    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let total = self.add_n(items)?;
        Ok(self.scale(total, 1.0 / items.len() as f64))
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are not computed"),
            Op::MatVec(w, x) => {
                let (w, x) = (v(w), v(x));
                if w.shape().len() != 2 || x.shape().len() != 1 || w.cols() != x.len() {
                    return Err(Error::dim("matvec", w.shape(), x.shape()));
                }
                let xd = x.data();
                let out = (0..w.rows()).map(|r| dot(w.row(r), xd)).collect();
                Tensor::vector(out)
            }
            Op::VecMat(x, w) => {
                let (x, w) = (v(x), v(w));
                if w.shape().len() != 2 || x.shape().len() != 1 || w.rows() != x.len() {
                    return Err(Error::dim("vecmat", x.shape(), w.shape()));
                }
                let mut out = vec![0.0; w.cols()];
                for (r, &xr) in x.data().iter().enumerate() {
                    if xr != 0.0 {
                        axpy(&mut out, xr, w.row(r));
                    }
                }
                Tensor::vector(out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(Error::dim(op_name(op), a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => map(v(a), |x| x * c),
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(Error::EmptyInput("concat"));
                }
                let mut out = Vec::new();
                for p in parts {
                    let t = v(p);
                    if t.shape().len() != 1 {
                        return Err(Error::dim("concat", t.shape(), &[t.len()]));
                    }
                    out.extend_from_slice(t.data());
                }
                Tensor::vector(out)
            }
            Op::Slice(a, start, len) => {
                let a = v(a);
                if *len == 0 || start + len > a.len() {
                    return Err(Error::dim("slice", a.shape(), &[*start, *len]));
                }
                Tensor::vector(a.data()[*start..start + len].to_vec())
            }
            Op::Tanh(a) => map(v(a), f64::tanh),
            Op::Sigmoid(a) => map(v(a), sigmoid),
            Op::Row(t, i) => {
                let t = v(t);
                if t.shape().len() != 2 {
                    return Err(Error::dim("row", t.shape(), &[*i]));
                }
                if *i >= t.rows() {
                    return Err(Error::Index { index: *i, len: t.rows() });
                }
                Tensor::vector(t.row(*i).to_vec())
            }
            Op::MaxOver(items) => {
                let first = v(items.first().ok_or(Error::EmptyInput("max_over"))?);
                let mut out = first.data().to_vec();
                for it in &items[1..] {
                    let t = v(it);
                    if t.shape() != first.shape() {
                        return Err(Error::dim("max_over", first.shape(), t.shape()));
                    }
                    for (o, &x) in out.iter_mut().zip(t.data()) {
                        if x > *o {
                            *o = x;
                        }
                    }
                }
                Tensor::new(first.shape().to_vec(), out)?
            }
            Op::Softmax(a) => Tensor::vector(softmax(v(a).data())),
            Op::SoftmaxCe(a, target) => {
                let a = v(a);
                if *target >= a.len() {
                    return Err(Error::Index { index: *target, len: a.len() });
                }
                Tensor::scalar(log_sum_exp(a.data()) - a.data()[*target])
            }
            Op::SigmoidBce(a, label) => {
                let a = v(a);
                if a.len() != 1 {
                    return Err(Error::dim("sigmoid_bce", a.shape(), &[1]));
                }
                Tensor::scalar(bce_with_logit(a.data()[0], *label))
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::AddN(items) => {
                let first = v(items.first().ok_or(Error::EmptyInput("add_n"))?);
                let mut out = first.data().to_vec();
                for it in &items[1..] {
                    let t = v(it);
                    if t.shape() != first.shape() {
                        return Err(Error::dim("add_n", first.shape(), t.shape()));
                    }
                    for (o, &x) in out.iter_mut().zip(t.data()) {
                        *o += x;
                    }
                }
                Tensor::new(first.shape().to_vec(), out)?
            }
        })
    }

    /// Propagates gradients from the scalar `root` back through the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut params = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if let Op::Param(name) = &node.op {
                params
                    .entry(name.clone())
                    .and_modify(|acc: &mut Tensor| {
                        for (a, &x) in acc.data_mut().iter_mut().zip(&g) {
                            *a += x;
                        }
                    })
                    .or_insert_with(|| {
                        Tensor::new(node.value.shape().to_vec(), g.clone()).expect("shape")
                    });
            }
            grads[i] = Some(g);
        }

        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                params
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let nodes = &self.nodes;
        macro_rules! acc {
            ($id:expr) => {
                slot(grads, nodes, $id)
            };
        }
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatVec(w, x) => {
                let (wv, xv) = (val(*w), val(*x));
                let cols = wv.cols();
                if needs(*w) {
                    let gw = acc!(*w);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(&mut gw[r * cols..(r + 1) * cols], gr, xv.data());
                        }
                    }
                }
                if needs(*x) {
                    let gx = acc!(*x);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(gx, gr, wv.row(r));
                        }
                    }
                }
            }
            Op::VecMat(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let cols = wv.cols();
                if needs(*x) {
                    let gx = acc!(*x);
                    for (r, gxr) in gx.iter_mut().enumerate() {
                        *gxr += dot(wv.row(r), g);
                    }
                }
                if needs(*w) {
                    let gw = acc!(*w);
                    for (r, &xr) in xv.data().iter().enumerate() {
                        if xr != 0.0 {
                            axpy(&mut gw[r * cols..(r + 1) * cols], xr, g);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if needs(id) {
                        axpy(acc!(id), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(acc!(*a), 1.0, g);
                }
                if needs(*b) {
                    axpy(acc!(*b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    for ((o, &gi), &bi) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if needs(*b) {
                    let av = val(*a).data();
                    for ((o, &gi), &ai) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(acc!(*a), *c, g);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        axpy(acc!(p), 1.0, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice(a, start, len) => {
                if needs(*a) {
                    axpy(&mut acc!(*a)[*start..start + len], 1.0, g);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    for ((o, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    for ((o, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Row(t, i) => {
                if needs(*t) {
                    let cols = val(*t).cols();
                    axpy(&mut acc!(*t)[i * cols..(i + 1) * cols], 1.0, g);
                }
            }
            Op::MaxOver(items) => {
                // Route each component to the first input attaining the max.
                let n = out.len();
                for j in 0..n {
                    let m = out.data()[j];
                    if let Some(&winner) = items.iter().find(|&&it| val(it).data()[j] == m) {
                        if needs(winner) {
                            acc!(winner)[j] += g[j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = out.data();
                    let gy: f64 = dot(g, y);
                    for ((o, &gi), &yi) in acc!(*a).iter_mut().zip(g).zip(y) {
                        *o += yi * (gi - gy);
                    }
                }
            }
            Op::SoftmaxCe(a, target) => {
                if needs(*a) {
                    let p = softmax(val(*a).data());
                    let ga = acc!(*a);
                    for (j, (o, pj)) in ga.iter_mut().zip(p).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (pj - onehot);
                    }
                }
            }
            Op::SigmoidBce(a, label) => {
                if needs(*a) {
                    let z = val(*a).data()[0];
                    acc!(*a)[0] += g[0] * (sigmoid(z) - label);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    for o in acc!(*a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::AddN(items) => {
                for &it in items {
                    if needs(it) {
                        axpy(acc!(it), 1.0, g);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut Vec<f64> {
    let len = nodes[id.0].value.len();
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatVec(a, b) | Op::VecMat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Slice(a, ..)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Row(a, _)
        | Op::Softmax(a)
        | Op::SoftmaxCe(a, _)
        | Op::SigmoidBce(a, _)
        | Op::Sum(a) => vec![*a],
        Op::Concat(v) | Op::MaxOver(v) | Op::AddN(v) => v.clone(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        _ => "mul",
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
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

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]` without forming σ(z).
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
