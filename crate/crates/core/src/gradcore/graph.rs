//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every loss evaluation. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;

use super::params::{GradTable, ParamStore, StoreId};
use super::Array;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive selector for [`Graph::primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Affine,
    Tanh,
    Swish,
    Softplus,
    Exp,
    Sum,
    Mean,
    Concat,
    Slice { start: usize, end: usize },
}

#[derive(Debug)]
enum Op<S> {
    Constant,
    Param,
    Affine { x: Node, w: Node, b: Node },
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Div(Node, Node),
    Neg(Node),
    Scale(Node, S),
    Shift(Node),
    Tanh(Node),
    Swish(Node),
    Softplus(Node),
    Exp(Node),
    Square(Node),
    Sin(Node),
    Cos(Node),
    Sum(Node),
    Mean(Node),
    Concat(Vec<Node>),
    Slice { input: Node, start: usize },
    TileRows(Node),
    GaussianNll { target: Array<S>, mean: Node, log_var: Node },
    DiagKl { mean_q: Node, log_var_q: Node, mean_p: Array<S>, log_var_p: Array<S> },
}

#[derive(Debug)]
struct Entry<S> {
    value: Array<S>,
    op: Op<S>,
}

/// Reverse-mode tape over dense arrays.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Entry<S>>,
    param_nodes: HashMap<(StoreId, String), Node>,
}

/// Per-node gradients produced by [`Graph::backward_all`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Array<S>>>,
    params: Vec<(StoreId, String, Node)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `node`, if `node` was reached.
    pub fn wrt(&self, node: Node) -> Option<&Array<S>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`; parameters the root does
    /// not depend on get zeros.
    pub fn for_store(&self, store: &ParamStore<S>) -> GradTable<S> {
        let mut table = store.zero_grads();
        for (sid, name, node) in &self.params {
            if *sid != store.id() {
                continue;
            }
            if let Some(g) = self.wrt(*node) {
                table.insert(name.clone(), g.clone());
            }
        }
        table
    }

    /// Like [`Gradients::for_store`] but restricted to names starting with
    /// `prefix`.
    pub fn for_store_prefix(&self, store: &ParamStore<S>, prefix: &str) -> GradTable<S> {
        let mut table = GradTable::new();
        for (name, value) in store.iter() {
            if name.starts_with(prefix) {
                table.insert(name, Array::zeros(value.shape()));
            }
        }
        for (sid, name, node) in &self.params {
            if *sid == store.id() && name.starts_with(prefix) {
                if let Some(g) = self.wrt(*node) {
                    table.insert(name.clone(), g.clone());
                }
            }
        }
        table
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Array<S>, b: &Array<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: Node) -> &Array<S> {
        &self.nodes[node.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, node: Node) -> S {
        self.nodes[node.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Array<S>, op: Op<S>) -> Result<Node> {
        if !value.all_finite() {
            return Err(Error::NonFinite { context: format!("output of `{op_name}`") });
        }
        self.nodes.push(Entry { value, op });
        Ok(Node(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array<S>) -> Node {
        self.nodes.push(Entry { value, op: Op::Constant });
        Node(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Node> {
        let key = (store.id(), name.to_string());
        if let Some(&n) = self.param_nodes.get(&key) {
            return Ok(n);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Entry { value, op: Op::Param });
        let n = Node(self.nodes.len() - 1);
        self.param_nodes.insert(key, n);
        Ok(n)
    }

    /// Dispatches one of the named primitives.
    pub fn primitive(&mut self, kind: OpKind, inputs: &[Node]) -> Result<Node> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape("primitive", format!("{kind:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            OpKind::Affine => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Swish => {
                arity(1)?;
                self.swish(inputs[0])
            }
            OpKind::Softplus => {
                arity(1)?;
                self.softplus(inputs[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, end } => {
                arity(1)?;
                self.slice(inputs[0], start, end)
            }
        }
    }

    /// `x · w + b` with `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Node, w: Node, b: Node) -> Result<Node> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.cols() != wv.rows() || wv.cols() != bv.len() {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, weight {:?}, bias {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (rows, out) = (xv.rows(), wv.cols());
        let mut y = Array::zeros(&[rows, out]);
        {
            let mut yv = y.view2_mut();
            for mut r in yv.rows_mut() {
                r.assign(&ndarray::ArrayView1::from(bv.data()));
            }
            general_mat_mul(S::one(), &xv.view2(), &wv.view2(), S::one(), &mut yv);
        }
        self.push("affine", y, Op::Affine { x, w, b })
    }

    fn binary(&mut self, name: &'static str, a: Node, b: Node, f: impl Fn(S, S) -> S) -> Result<Array<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        Ok(av.zip_map(bv, f))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, Op::Neg(a))
    }

    /// `k · a` for a constant `k`.
    pub fn scale(&mut self, a: Node, k: S) -> Result<Node> {
        let v = self.value(a).map(|x| x * k);
        self.push("scale", v, Op::Scale(a, k))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Node, c: S) -> Result<Node> {
        let v = self.value(a).map(|x| x + c);
        self.push("shift", v, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x.tanh());
        self.push("tanh", v, Op::Tanh(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push("swish", v, Op::Swish(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(softplus);
        self.push("softplus", v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x.exp());
        self.push("exp", v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a))
    }

    pub fn sin(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x.sin());
        self.push("sin", v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a).map(|x| x.cos());
        self.push("cos", v, Op::Cos(a))
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, a: Node) -> Result<Node> {
        let v = Array::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Node) -> Result<Node> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let v = Array::scalar(av.sum() / S::from_usize_lossy(av.len()));
        self.push("mean", v, Op::Mean(a))
    }

    /// Concatenation along the last axis. Inputs must agree on every other
    /// axis.
    pub fn concat(&mut self, inputs: &[Node]) -> Result<Node> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.value(*first).shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &n in inputs {
            let s = self.value(n).shape();
            let l = s.split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
            if s.is_empty() || l != lead {
                let shapes: Vec<_> = inputs.iter().map(|&n| self.value(n).shape().to_vec()).collect();
                return Err(Error::shape("concat", format!("incompatible shapes {shapes:?}")));
            }
            width += self.value(n).cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &n in inputs {
                data.extend_from_slice(self.value(n).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let v = Array::new(shape, data)?;
        self.push("concat", v, Op::Concat(inputs.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Node, start: usize, end: usize) -> Result<Node> {
        let av = self.value(a);
        if av.rank() == 0 || start >= end || end > av.cols() {
            return Err(Error::shape("slice", format!("range {start}..{end} of {:?}", av.shape())));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = end - start;
        let v = Array::new(shape, data)?;
        self.push("slice", v, Op::Slice { input: a, start })
    }

    /// Repeats a vector `[d]` into `rows` identical rows `[rows, d]`.
    pub fn tile_rows(&mut self, a: Node, rows: usize) -> Result<Node> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::shape("tile_rows", format!("expected a vector, got {:?}", av.shape())));
        }
        let d = av.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let v = Array::new(vec![rows, d], data)?;
        self.push("tile_rows", v, Op::TileRows(a))
    }

    /// Negative log density of a diagonal Gaussian summed over all elements:
    /// `½ Σ [(y−µ)² e^{−lv} + lv + ln 2π]`.
    pub fn gaussian_nll(&mut self, target: &Array<S>, mean: Node, log_var: Node) -> Result<Node> {
        let (mv, lv) = (self.value(mean), self.value(log_var));
        if target.shape() != mv.shape() || mv.shape() != lv.shape() {
            return Err(Error::shape(
                "gaussian_nll",
                format!("target {:?}, mean {:?}, log_var {:?}", target.shape(), mv.shape(), lv.shape()),
            ));
        }
        let half = S::lit(0.5);
        let c = S::lit(HALF_LN_2PI);
        let mut total = S::zero();
        for ((&y, &m), &l) in target.data().iter().zip(mv.data()).zip(lv.data()) {
            let d = y - m;
            total = total + half * (d * d * (-l).exp() + l) + c;
        }
        self.push("gaussian_nll", Array::scalar(total), Op::GaussianNll { target: target.clone(), mean, log_var })
    }

    /// `KL(N(µq, e^{lvq}) ‖ N(µp, e^{lvp}))` for diagonal Gaussians, summed
    /// over all elements.
    pub fn diag_gaussian_kl(
        &mut self,
        mean_q: Node,
        log_var_q: Node,
        mean_p: &Array<S>,
        log_var_p: &Array<S>,
    ) -> Result<Node> {
        let (mq, lq) = (self.value(mean_q), self.value(log_var_q));
        if mq.shape() != lq.shape() || mq.shape() != mean_p.shape() || mq.shape() != log_var_p.shape() {
            return Err(Error::shape(
                "diag_gaussian_kl",
                format!(
                    "mean_q {:?}, log_var_q {:?}, mean_p {:?}, log_var_p {:?}",
                    mq.shape(),
                    lq.shape(),
                    mean_p.shape(),
                    log_var_p.shape()
                ),
            ));
        }
        let half = S::lit(0.5);
        let mut total = S::zero();
        for i in 0..mq.len() {
            let (a, la, b, lb) = (mq.data()[i], lq.data()[i], mean_p.data()[i], log_var_p.data()[i]);
            let d = a - b;
            total = total + half * (lb - la + ((la - lb).exp() + d * d * (-lb).exp()) - S::one());
        }
        // Closed form can dip below zero by rounding when q == p.
        let total = total.max(S::zero());
        self.push(
            "diag_gaussian_kl",
            Array::scalar(total),
            Op::DiagKl { mean_q, log_var_q, mean_p: mean_p.clone(), log_var_p: log_var_p.clone() },
        )
    }

    /// Reverse pass from a single-element `root`, returning parameter
    /// gradients for `params` (zeros where unreachable).
    pub fn backward(&self, root: Node, params: &ParamStore<S>) -> Result<GradTable<S>> {
        Ok(self.backward_all(root)?.for_store(params))
    }

    /// Reverse pass from `root`, keeping every node's gradient.
    pub fn backward_all(&self, root: Node) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Array<S>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array::full(rv.shape(), S::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &self.nodes[i];
            self.propagate(entry, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<_> = self
            .param_nodes
            .iter()
            .filter(|(_, n)| n.0 <= root.0)
            .map(|((sid, name), n)| (*sid, name.clone(), *n))
            .collect();
        params.sort_by(|a, b| a.2 .0.cmp(&b.2 .0));
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, entry: &Entry<S>, g: &Array<S>, grads: &mut [Option<Array<S>>]) {
        let val = |n: Node| &self.nodes[n.0].value;
        let y = &entry.value;
        match &entry.op {
            Op::Constant | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = Array::zeros(xv.shape());
                general_mat_mul(S::one(), &g.view2(), &wv.view2().t(), S::zero(), &mut gx.view2_mut());
                let mut gw = Array::zeros(wv.shape());
                general_mat_mul(S::one(), &xv.view2().t(), &g.view2(), S::zero(), &mut gw.view2_mut());
                let out = wv.cols();
                let mut gb = Array::zeros(&[out]);
                for r in 0..g.rows() {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |gi, bi| gi * bi));
                accumulate(grads, *b, g.zip_map(val(*a), |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi / bi));
                let mut gb = g.zip_map(av, |gi, ai| -gi * ai);
                for (v, &bi) in gb.data_mut().iter_mut().zip(bv.data()) {
                    *v = *v / (bi * bi);
                }
                accumulate(grads, *b, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(grads, *a, g.map(|v| v * k))
            }
            Op::Shift(a) => accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (S::one() - yi * yi))),
            Op::Swish(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (S::one() - s))
                }),
            ),
            Op::Softplus(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| gi * sigmoid(xi))),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| S::lit(2.0) * gi * xi)),
            Op::Sin(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| gi * xi.cos())),
            Op::Cos(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, xi| -gi * xi.sin())),
            Op::Sum(a) => accumulate(grads, *a, Array::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let av = val(*a);
                let k = g.item() / S::from_usize_lossy(av.len());
                accumulate(grads, *a, Array::full(av.shape(), k))
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let mut gp = Vec::with_capacity(pv.len());
                    for r in 0..g.rows() {
                        gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, Array::new(pv.shape().to_vec(), gp).expect("shape preserved"));
                }
            }
            Op::Slice { input, start } => {
                let iv = val(*input);
                let mut gi = Array::zeros(iv.shape());
                let (cols, w) = (iv.cols(), g.cols());
                for r in 0..g.rows() {
                    gi.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *input, gi);
            }
            Op::TileRows(a) => {
                let mut ga = Array::zeros(val(*a).shape());
                for r in 0..g.rows() {
                    for (acc, &v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GaussianNll { target, mean, log_var } => {
                let (mv, lv) = (val(*mean), val(*log_var));
                let gs = g.item();
                let half = S::lit(0.5);
                let n = target.len();
                let mut gm = Vec::with_capacity(n);
                let mut gl = Vec::with_capacity(n);
                for i in 0..n {
                    let d = target.data()[i] - mv.data()[i];
                    let prec = (-lv.data()[i]).exp();
                    gm.push(-gs * d * prec);
                    gl.push(gs * half * (S::one() - d * d * prec));
                }
                accumulate(grads, *mean, Array::new(mv.shape().to_vec(), gm).expect("shape"));
                accumulate(grads, *log_var, Array::new(lv.shape().to_vec(), gl).expect("shape"));
            }
            Op::DiagKl { mean_q, log_var_q, mean_p, log_var_p } => {
                let (mq, lq) = (val(*mean_q), val(*log_var_q));
                let gs = g.item();
                let half = S::lit(0.5);
                let n = mq.len();
                let mut gm = Vec::with_capacity(n);
                let mut gl = Vec::with_capacity(n);
                for i in 0..n {
                    let lp = log_var_p.data()[i];
                    gm.push(gs * (mq.data()[i] - mean_p.data()[i]) * (-lp).exp());
                    gl.push(gs * half * ((lq.data()[i] - lp).exp() - S::one()));
                }
                accumulate(grads, *mean_q, Array::new(mq.shape().to_vec(), gm).expect("shape"));
                accumulate(grads, *log_var_q, Array::new(lq.shape().to_vec(), gl).expect("shape"));
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Array<S>>], node: Node, g: Array<S>) {
    match &mut grads[node.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
