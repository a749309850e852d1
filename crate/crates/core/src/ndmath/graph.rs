//! Reverse-mode automatic differentiation over batched matrix computations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! (always a 2-D matrix) and the indices of its operands. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products.
//! Graphs are built fresh for every batch.

use std::collections::HashMap;

use super::array::gemm;
use super::{DenseArray, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Floor(NodeId, f64),
    Clamp(NodeId, f64, f64),
    ColSlice(NodeId, usize, usize),
    Concat(Vec<NodeId>),
    PermuteCols(NodeId, Vec<usize>),
    RowSum(NodeId),
    SumAll(NodeId),
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Construct with [`Graph::new`] to record gradients or
/// [`Graph::inference`] for forward-only evaluation.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    params: HashMap<ParamId, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), training: true, params: HashMap::new() }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), training: false, params: HashMap::new() }
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

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.training });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input (no gradient is propagated into it).
    pub fn input(&mut self, value: DenseArray) -> NodeId {
        self.push(value.as_matrix(), Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::wrt`].
    pub fn variable(&mut self, value: DenseArray) -> NodeId {
        self.push(value.as_matrix(), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).as_matrix(), Op::Leaf, true);
        self.params.insert(id, n);
        n
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return shape_err(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `max(a, floor)`.
    pub fn floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, Op::Floor(a, floor), |x| x.max(floor))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Columns `start..end` of `a`.
    pub fn cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return shape_err(format!("column range {}..{} of {:?}", start, end, av.shape()));
        }
        let v = av.col_slice(start, end);
        let rg = self.rg(a);
        Ok(self.push(v, Op::ColSlice(a, start, end), rg))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat of zero parts"),
        };
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return shape_err(format!("concat row mismatch {} vs {}", v.rows(), rows));
            }
            let c = v.cols();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(v.row_slice(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(DenseArray::from_raw(vec![rows, total], out), Op::Concat(parts.to_vec()), rg))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let c = av.cols();
        if perm.len() != c {
            return shape_err(format!("permutation of length {} for {} columns", perm.len(), c));
        }
        let r = av.rows();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let src = av.row_slice(i);
            for (j, &p) in perm.iter().enumerate() {
                out[i * c + j] = src[p];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(DenseArray::from_raw(vec![r, c], out), Op::PermuteCols(a, perm.to_vec()), rg))
    }

    /// Sum of each row, giving an `r x 1` column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let sums = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect::<Vec<f64>>();
        let v = DenseArray::from_raw(vec![sums.len(), 1], sums);
        let rg = self.rg(a);
        self.push(v, Op::RowSum(a), rg)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(DenseArray::from_raw(vec![1, 1], vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return shape_err(format!("expected a scalar node, got {:?}", v.shape()));
        }
        Ok(v.data()[0])
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.training {
            return Err(Error::State("backward called on a graph built in inference mode".into()));
        }
        self.scalar(loss)?;
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::filled(&[1, 1], 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.params.iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, d: DenseArray| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if rg(*a) {
                    let mut da = vec![0.0; r * k];
                    gemm(r, c, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    acc(*a, DenseArray::from_raw(vec![r, k], da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm(k, r, c, av.data(), true, g.data(), false, &mut db, 0.0);
                    acc(*b, DenseArray::from_raw(vec![k, c], db));
                }
            }
            Op::AddBias(a, b) => {
                if rg(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row_slice(i)) {
                            *d += x;
                        }
                    }
                    acc(*b, DenseArray::from_raw(vec![1, c], db));
                }
                acc(*a, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, zip(g, val(*b), |g, y| g * y));
                }
                if rg(*b) {
                    acc(*b, zip(g, val(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    acc(*a, zip(g, bv, |g, y| g / y));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip(&node.value, bv, |q, y| q / y);
                    acc(*b, zip(g, &q, |g, t| -g * t));
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| k * x)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Tanh(a) => acc(*a, zip(g, &node.value, |g, y| g * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, zip(g, &node.value, |g, y| g * y)),
            Op::Log(a) => acc(*a, zip(g, val(*a), |g, x| g / x)),
            Op::Softplus(a) => acc(*a, zip(g, val(*a), |g, x| g * sigmoid(x))),
            Op::Square(a) => acc(*a, zip(g, val(*a), |g, x| 2.0 * g * x)),
            Op::Floor(a, f) => acc(*a, zip(g, val(*a), |g, x| if x > *f { g } else { 0.0 })),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                zip(g, val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::ColSlice(a, start, end) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let w = end - start;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*a, DenseArray::from_raw(vec![r, c], d));
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let r = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if rg(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        }
                        acc(p, DenseArray::from_raw(vec![r, c], d));
                    }
                    off += c;
                }
            }
            Op::PermuteCols(a, perm) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &p) in perm.iter().enumerate() {
                        d[i * c + p] += g.data()[i * c + j];
                    }
                }
                acc(*a, DenseArray::from_raw(vec![r, c], d));
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c..(i + 1) * c].fill(g.data()[i]);
                }
                acc(*a, DenseArray::from_raw(vec![r, c], d));
            }
            Op::SumAll(a) => {
                let av = val(*a);
                acc(*a, DenseArray::filled(&[av.rows(), av.cols()], g.data()[0]));
            }
        }
    }
}

fn zip(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> DenseArray {
    DenseArray::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
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

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the node does not influence the loss.
    pub fn wrt(&self, node: NodeId) -> Option<&DenseArray> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&DenseArray> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.wrt(*n))
    }

    /// One gradient per stored parameter, shaped like the parameter; zero where unused.
    pub fn for_store(&self, store: &ParamStore) -> Vec<DenseArray> {
        let mut out: Vec<DenseArray> = store.iter().map(|p| DenseArray::zeros(p.value.shape())).collect();
        for &(p, n) in &self.params {
            if let Some(g) = self.wrt(n) {
                out[p.0].data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::finite_diff_grad;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(DenseArray::vector(vec![3.0]).unwrap());
        let y = g.square(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softplus_sum_gradient_is_sigmoid() {
        let xs = vec![-1.5, 0.0, 0.7, 2.0];
        let mut g = Graph::new();
        let x = g.variable(DenseArray::vector(xs.clone()).unwrap());
        let y = g.softplus(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let d = grads.wrt(x).unwrap();
        assert_eq!(d.data()[1], 0.5);
        for (gv, xv) in d.data().iter().zip(&xs) {
            assert!((gv - sigmoid(*xv)).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.variable(DenseArray::vector(vec![1.0]).unwrap());
        let l = g.sum(x);
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(DenseArray::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-6, 0.01, 0.5, 3.0, 29.0, 31.0, 200.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{}", y);
        }
    }

    /// Every op checked against central differences on a composite expression.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let x0 = DenseArray::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, -0.4, 0.1]).unwrap();
        let w = DenseArray::matrix(3, 3, vec![0.2, -0.5, 0.9, 0.4, 0.1, -0.3, -0.7, 0.6, 0.25]).unwrap();
        let b = DenseArray::matrix(1, 3, vec![0.1, -0.2, 0.05]).unwrap();

        let build = |g: &mut Graph, x: NodeId| -> NodeId {
            let wn = g.input(w.clone());
            let bn = g.input(b.clone());
            let h = g.matmul(x, wn).unwrap();
            let h = g.add_bias(h, bn).unwrap();
            let t = g.tanh(h);
            let s = g.softplus(h);
            let e = g.exp(t);
            let p = g.mul(e, s).unwrap();
            let d = g.div(p, e).unwrap();
            let sq = g.square(d);
            let r = g.relu(x);
            let q = g.add(sq, r).unwrap();
            let sl = g.cols(q, 1, 3).unwrap();
            let head = g.cols(q, 0, 1).unwrap();
            let cat = g.concat(&[sl, head]).unwrap();
            let perm = g.permute_cols(cat, &[2, 0, 1]).unwrap();
            let cl = g.clamp(perm, -0.5, 2.5);
            let fl = g.floor(cl, 0.05);
            let lg = g.log(fl);
            let rs = g.row_sum(lg);
            let off = g.offset(rs, 3.0);
            let sc = g.scale(off, 0.7);
            let sub = g.sub(sc, rs).unwrap();
            g.mean(sub)
        };

        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();

        let f = |xv: &DenseArray| {
            let mut g = Graph::inference();
            let x = g.input(xv.clone());
            let l = build(&mut g, x);
            g.scalar(l).unwrap()
        };
        let numeric = finite_diff_grad(f, &x0, 1e-6).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-4 * n.abs().max(1e-3), "{} vs {}", a, n);
        }
    }
}
