//! Minimal reverse-mode automatic differentiation over a closed set of
//! matrix primitives: matmul, gather/scatter, elementwise maps, reductions
//! and broadcasts.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into every leaf marked as
//! requiring them. Tapes are built per step and discarded.

use std::sync::Arc;

use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Mat};

pub type NodeId = usize;

/// Index plan for gather-style ops (im2col convolution, transposed
/// convolution, nearest resize). `template` maps every element of one output
/// block to an element of the corresponding input block, `-1` meaning a
/// zero (padding) source.
#[derive(Debug)]
pub struct GatherPlan {
    pub template: Vec<i64>,
    pub out_rows_per_item: usize,
    pub out_cols: usize,
    pub in_rows_per_item: usize,
}

impl GatherPlan {
    fn out_block(&self) -> usize {
        self.out_rows_per_item * self.out_cols
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// a * b^T with b untransposed.
    MatmulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// [n x p] + bias [1 x p].
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Silu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowBroadcast(NodeId, usize),
    LogSumExpRow(NodeId),
    /// Diagonal of a square matrix as a column vector.
    DiagCol(NodeId),
    Concat(NodeId, NodeId),
    Reshape(NodeId),
    Gather(NodeId, Arc<GatherPlan>),
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn child(&mut self, op: Op, value: Mat, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(op, value, needs)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = crate::tensor::matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.child(Op::Matmul(a, b), v, &[a, b])
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut v = Mat::zeros(am.rows, bm.rows);
        matmul_bt_into(am, bm, &mut v, false);
        self.child(Op::MatmulBt(a, b), v, &[a, b])
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(am.same_shape(bm), "elementwise op shape mismatch");
        let data = am
            .data
            .iter()
            .zip(&bm.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Mat::from_vec(am.rows, am.cols, data);
        self.child(op, v, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert_eq!(bm.rows, 1, "bias must be a row vector");
        assert_eq!(am.cols, bm.cols, "bias width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            for (x, b) in row.iter_mut().zip(&bm.data) {
                *x += b;
            }
        }
        self.child(Op::AddBias(a, bias), v, &[a, bias])
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let am = &self.nodes[a].value;
        let data = am.data.iter().map(|&x| f(x)).collect();
        let v = Mat::from_vec(am.rows, am.cols, data);
        self.child(op, v, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.child(Op::Sum(a), Mat::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let s: f64 = m.data.iter().sum();
        let v = Mat::scalar(s / m.len() as f64);
        self.child(Op::Mean(a), v, &[a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.child(Op::RowSum(a), v, &[a])
    }

    pub fn row_broadcast(&mut self, a: NodeId, cols: usize) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.cols, 1, "row_broadcast expects a column vector");
        let mut data = Vec::with_capacity(m.rows * cols);
        for r in 0..m.rows {
            data.extend(std::iter::repeat(m.data[r]).take(cols));
        }
        let v = Mat::from_vec(m.rows, cols, data);
        self.child(Op::RowBroadcast(a, cols), v, &[a])
    }

    pub fn log_sum_exp_row(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let data = (0..m.rows)
            .map(|r| {
                let row = m.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.child(Op::LogSumExpRow(a), v, &[a])
    }

    pub fn diag_col(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.rows, m.cols, "diag_col expects a square matrix");
        let data = (0..m.rows).map(|r| m.at(r, r)).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.child(Op::DiagCol(a), v, &[a])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(am.rows, bm.rows, "concat row mismatch");
        let cols = am.cols + bm.cols;
        let mut data = Vec::with_capacity(am.rows * cols);
        for r in 0..am.rows {
            data.extend_from_slice(am.row(r));
            data.extend_from_slice(bm.row(r));
        }
        let v = Mat::from_vec(am.rows, cols, data);
        self.child(Op::Concat(a, b), v, &[a, b])
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.len(), rows * cols, "reshape size mismatch");
        let v = Mat::from_vec(rows, cols, m.data.clone());
        self.child(Op::Reshape(a), v, &[a])
    }

    pub fn gather(&mut self, a: NodeId, plan: Arc<GatherPlan>) -> NodeId {
        let m = &self.nodes[a].value;
        let in_block = plan.in_rows_per_item * m.cols;
        assert_eq!(m.rows % plan.in_rows_per_item, 0, "gather input rows");
        let items = m.rows / plan.in_rows_per_item;
        assert_eq!(plan.template.len(), plan.out_block());
        let mut data = vec![0.0; items * plan.out_block()];
        for item in 0..items {
            let src = &m.data[item * in_block..(item + 1) * in_block];
            let dst = &mut data[item * plan.out_block()..(item + 1) * plan.out_block()];
            for (d, &t) in dst.iter_mut().zip(&plan.template) {
                if t >= 0 {
                    *d = src[t as usize];
                }
            }
        }
        let v = Mat::from_vec(items * plan.out_rows_per_item, plan.out_cols, data);
        self.child(Op::Gather(a, plan), v, &[a])
    }

    /// Backpropagate from a scalar root. Returns per-node gradients; fetch
    /// them for leaves via [`Tape::grad`].
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::scalar(1.0));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn ensure<'a>(&self, grads: &'a mut Vec<Option<Mat>>, id: NodeId) -> &'a mut Mat {
        if grads[id].is_none() {
            let m = &self.nodes[id].value;
            grads[id] = Some(Mat::zeros(m.rows, m.cols));
        }
        grads[id].as_mut().unwrap()
    }

    fn accumulate_parents(&self, id: NodeId, g: &Mat, grads: &mut Vec<Option<Mat>>) {
        let wants = |s: &Self, p: NodeId| s.nodes[p].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(self, a) {
                    let bv = self.nodes[b].value.clone();
                    let ga = self.ensure(grads, a);
                    matmul_bt_into(g, &bv, ga, true);
                }
                if wants(self, b) {
                    let av = self.nodes[a].value.clone();
                    let gb = self.ensure(grads, b);
                    matmul_at_into(&av, g, gb, true);
                }
            }
            Op::MatmulBt(a, b) => {
                // y = a b^T: ga += g b ; gb += g^T a
                let (a, b) = (*a, *b);
                if wants(self, a) {
                    let bv = self.nodes[b].value.clone();
                    let ga = self.ensure(grads, a);
                    matmul_into(g, &bv, ga, true);
                }
                if wants(self, b) {
                    let av = self.nodes[a].value.clone();
                    let gb = self.ensure(grads, b);
                    matmul_at_into(g, &av, gb, true);
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b].iter() {
                    if wants(self, *p) {
                        let gp = self.ensure(grads, *p);
                        for (d, s) in gp.data.iter_mut().zip(&g.data) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    for (d, s) in ga.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                if wants(self, *b) {
                    let gb = self.ensure(grads, *b);
                    for (d, s) in gb.data.iter_mut().zip(&g.data) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(self, a) {
                    let bv = self.nodes[b].value.data.clone();
                    let ga = self.ensure(grads, a);
                    for ((d, s), y) in ga.data.iter_mut().zip(&g.data).zip(&bv) {
                        *d += s * y;
                    }
                }
                if wants(self, b) {
                    let av = self.nodes[a].value.data.clone();
                    let gb = self.ensure(grads, b);
                    for ((d, s), x) in gb.data.iter_mut().zip(&g.data).zip(&av) {
                        *d += s * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if wants(self, a) {
                    let bv = self.nodes[b].value.data.clone();
                    let ga = self.ensure(grads, a);
                    for ((d, s), y) in ga.data.iter_mut().zip(&g.data).zip(&bv) {
                        *d += s / y;
                    }
                }
                if wants(self, b) {
                    let av = self.nodes[a].value.data.clone();
                    let bv = self.nodes[b].value.data.clone();
                    let gb = self.ensure(grads, b);
                    for (i, d) in gb.data.iter_mut().enumerate() {
                        *d -= g.data[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    for (d, s) in ga.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                if wants(self, *bias) {
                    let gb = self.ensure(grads, *bias);
                    for r in 0..g.rows {
                        for (d, s) in gb.data.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.unary(grads, *a, g, |_x, s| s * c),
            Op::AddConst(a, _) => self.unary(grads, *a, g, |_x, s| s),
            Op::Silu(a) => self.unary(grads, *a, g, |x, s| {
                let sg = sigmoid(x);
                s * (sg + x * sg * (1.0 - sg))
            }),
            Op::Sigmoid(a) => self.unary(grads, *a, g, |x, s| {
                let sg = sigmoid(x);
                s * sg * (1.0 - sg)
            }),
            Op::Tanh(a) => self.unary(grads, *a, g, |x, s| {
                let t = x.tanh();
                s * (1.0 - t * t)
            }),
            Op::Exp(a) => self.unary(grads, *a, g, |x, s| s * x.exp()),
            Op::Ln(a) => self.unary(grads, *a, g, |x, s| s / x),
            Op::Sqrt(a) => self.unary(grads, *a, g, |x, s| s * 0.5 / x.sqrt()),
            Op::Square(a) => self.unary(grads, *a, g, |x, s| s * 2.0 * x),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary(grads, *a, g, move |x, s| {
                    if x > lo && x < hi {
                        s
                    } else {
                        0.0
                    }
                })
            }
            Op::Sum(a) => {
                if wants(self, *a) {
                    let s = g.data[0];
                    let ga = self.ensure(grads, *a);
                    for d in ga.data.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Mean(a) => {
                if wants(self, *a) {
                    let n = self.nodes[*a].value.len() as f64;
                    let s = g.data[0] / n;
                    let ga = self.ensure(grads, *a);
                    for d in ga.data.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::RowSum(a) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    let cols = ga.cols;
                    for r in 0..ga.rows {
                        let s = g.data[r];
                        for d in ga.row_mut(r).iter_mut().take(cols) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowBroadcast(a, _) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    for r in 0..g.rows {
                        ga.data[r] += g.row(r).iter().sum::<f64>();
                    }
                }
            }
            Op::LogSumExpRow(a) => {
                if wants(self, *a) {
                    let av = self.nodes[*a].value.clone();
                    let ga = self.ensure(grads, *a);
                    for r in 0..av.rows {
                        let row = av.row(r);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                        let s = g.data[r];
                        for (c, &x) in row.iter().enumerate() {
                            ga.data[r * av.cols + c] += s * (x - mx).exp() / z;
                        }
                    }
                }
            }
            Op::DiagCol(a) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    let n = ga.rows;
                    for r in 0..n {
                        ga.data[r * n + r] += g.data[r];
                    }
                }
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let ac = self.nodes[a].value.cols;
                let bc = self.nodes[b].value.cols;
                if wants(self, a) {
                    let ga = self.ensure(grads, a);
                    for r in 0..g.rows {
                        for c in 0..ac {
                            ga.data[r * ac + c] += g.at(r, c);
                        }
                    }
                }
                if wants(self, b) {
                    let gb = self.ensure(grads, b);
                    for r in 0..g.rows {
                        for c in 0..bc {
                            gb.data[r * bc + c] += g.at(r, ac + c);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(self, *a) {
                    let ga = self.ensure(grads, *a);
                    for (d, s) in ga.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
            }
            Op::Gather(a, plan) => {
                if wants(self, *a) {
                    let plan = plan.clone();
                    let ga = self.ensure(grads, *a);
                    let in_block = plan.in_rows_per_item * ga.cols;
                    let items = ga.rows / plan.in_rows_per_item;
                    let out_block = plan.out_block();
                    for item in 0..items {
                        let src = &g.data[item * out_block..(item + 1) * out_block];
                        let dst = &mut ga.data[item * in_block..(item + 1) * in_block];
                        for (s, &t) in src.iter().zip(&plan.template) {
                            if t >= 0 {
                                dst[t as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut Vec<Option<Mat>>,
        a: NodeId,
        g: &Mat,
        df: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let av = self.nodes[a].value.data.clone();
        let ga = self.ensure(grads, a);
        for (i, d) in ga.data.iter_mut().enumerate() {
            *d += df(av[i], g.data[i]);
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences against tape gradients for a composite
    /// expression touching most primitives.
    #[test]
    fn finite_difference_agreement() {
        let xs = vec![0.3, -0.7, 1.2, 0.05, -1.4, 2.2];
        let ws = vec![0.5, -0.2, 0.8, 1.5, -0.9, 0.1];

        let eval = |xv: &[f64], wv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.var(Mat::from_vec(2, 3, xv.to_vec()));
            let w = t.var(Mat::from_vec(3, 2, wv.to_vec()));
            let h = t.matmul(x, w);
            let h = t.silu(h);
            let s = t.square(h);
            let r = t.row_sum(s);
            let r = t.add_const(r, 1e-3);
            let r = t.sqrt(r);
            let l = t.log_sum_exp_row(r);
            let m = t.mean(l);
            t.value(m).data[0]
        };

        let mut t = Tape::new();
        let x = t.var(Mat::from_vec(2, 3, xs.clone()));
        let w = t.var(Mat::from_vec(3, 2, ws.clone()));
        let h = t.matmul(x, w);
        let h = t.silu(h);
        let s = t.square(h);
        let r = t.row_sum(s);
        let r = t.add_const(r, 1e-3);
        let r = t.sqrt(r);
        let l = t.log_sum_exp_row(r);
        let m = t.mean(l);
        let grads = t.backward(m);

        let h = 1e-6;
        for i in 0..xs.len() {
            let mut up = xs.clone();
            let mut dn = xs.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&up, &ws) - eval(&dn, &ws)) / (2.0 * h);
            let an = grads.get(x).unwrap().data[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "x[{i}]: fd={fd} tape={an}"
            );
        }
        for i in 0..ws.len() {
            let mut up = ws.clone();
            let mut dn = ws.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&xs, &up) - eval(&xs, &dn)) / (2.0 * h);
            let an = grads.get(w).unwrap().data[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "w[{i}]: fd={fd} tape={an}"
            );
        }
    }

    #[test]
    fn gather_scatter_roundtrip() {
        // 1 item, 2x2 "image" with 1 channel gathered into 2x2 patches with padding.
        let plan = Arc::new(GatherPlan {
            template: vec![-1, 0, 1, 2, 0, 1, 2, 3],
            out_rows_per_item: 2,
            out_cols: 4,
            in_rows_per_item: 1,
        });
        let mut t = Tape::new();
        let x = t.var(Mat::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let gth = t.gather(x, plan);
        assert_eq!(
            t.value(gth).data,
            vec![0.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0]
        );
        let s = t.sum(gth);
        let grads = t.backward(s);
        // element 0 contributes twice, 1 twice, 2 twice, 3 once
        assert_eq!(grads.get(x).unwrap().data, vec![2.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn grad_accumulates_on_reuse() {
        let mut t = Tape::new();
        let x = t.var(Mat::scalar(3.0));
        let y = t.mul(x, x); // x^2
        let s = t.sum(y);
        let grads = t.backward(s);
        assert_eq!(grads.get(x).unwrap().data[0], 6.0);
    }
}
