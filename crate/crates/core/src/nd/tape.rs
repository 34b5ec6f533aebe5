//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so node ids are already a topological order and the backward pass
//! is a single reverse sweep. Tapes are cheap to create and are rebuilt per
//! episode; they are not `Send` and stay on the thread that created them.

use std::cell::RefCell;
use std::rc::Rc;

use super::param::Parameter;
use super::tensor::{matmul_into, transpose_data, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Elu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Softmax { src: usize, axis: usize },
    LogSoftmax(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    RepeatRows(usize, usize),
    TileRows(usize),
    GroupSumRows(usize),
    NormalizeRows { src: usize, norms: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, groups: usize, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that takes no part in differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A differentiable leaf that is not tied to a named parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records `param` as a differentiable leaf. Gradients reaching it are
    /// reported under the parameter's name by [`Gradients::param`].
    pub fn param(&self, param: &Parameter) -> Var<'_> {
        let var = self.variable(param.value.clone());
        self.params.borrow_mut().push((param.name.clone(), var.id));
        var
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::Axis { axis, rank: shape0.len() });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let same_rest = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::dim("concat", format!("{shape0:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = total;
        let needs = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: ids, axis }, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.borrow().clone() })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }

    /// Summed gradient of every leaf recorded for the named parameter.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for (n, id) in &self.params {
            if n != name {
                continue;
            }
            if let Some(g) = self.grads.get(*id).and_then(Option::as_ref) {
                match &mut out {
                    Some(acc) => acc.axpy(1.0, g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Adds each parameter's gradient into `Parameter::grad`. Parameters the
    /// loss does not reach are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.param(&p.name) {
                p.grad.axpy(1.0, &g);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_along(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Tensor values for a binary op, broadcasting a one-element side.
fn broadcast_pair(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Vec<usize>, usize)> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok((a.shape().to_vec(), a.len()))
    } else if a.len() == 1 {
        Ok((b.shape().to_vec(), b.len()))
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

#[inline]
fn bget(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Reduces an upstream gradient onto an operand that may have been broadcast.
fn reduce_to(g: Vec<f64>, like: &Tensor) -> Tensor {
    if like.len() == 1 && g.len() != 1 {
        Tensor::from_parts(like.shape().to_vec(), vec![g.iter().sum()])
    } else {
        Tensor::from_parts(like.shape().to_vec(), g)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].needs_grad;
    let gd = g.data();
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                accumulate(grads, a, reduce_to(gd.to_vec(), val(a)));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(gd.iter().map(|v| sign * v).collect(), val(b)));
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let ga = gd.iter().enumerate().map(|(i, g)| g * bget(bv, i)).collect();
                accumulate(grads, a, reduce_to(ga, av));
            }
            if needs(b) {
                let gb = gd.iter().enumerate().map(|(i, g)| g * bget(av, i)).collect();
                accumulate(grads, b, reduce_to(gb, bv));
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let ga = gd.iter().enumerate().map(|(i, g)| g / bget(bv, i)).collect();
                accumulate(grads, a, reduce_to(ga, av));
            }
            if needs(b) {
                let gb = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let d = bget(bv, i);
                        -g * bget(av, i) / (d * d)
                    })
                    .collect();
                accumulate(grads, b, reduce_to(gb, bv));
            }
        }
        &Op::Scale(a, c) => accumulate(grads, a, g.scale(c)),
        &Op::Shift(a) => accumulate(grads, a, g.clone()),
        &Op::Elu(a) => {
            let x = val(a).data();
            let d = gd
                .iter()
                .zip(x)
                .zip(y.data())
                .map(|((g, &x), &y)| if x > 0.0 { *g } else { g * (y + 1.0) })
                .collect();
            accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        &Op::Exp(a) => {
            let d = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        &Op::Log(a) => {
            let d = gd.iter().zip(val(a).data()).map(|(g, x)| g / x).collect();
            accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        &Op::Sqrt(a) => {
            let d = gd.iter().zip(y.data()).map(|(g, y)| g / (2.0 * y)).collect();
            accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        &Op::ClampMin(a, floor) => {
            let d = gd
                .iter()
                .zip(val(a).data())
                .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                .collect();
            accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(a) {
                let bt = transpose_data(bv.data(), k, n);
                let mut ga = vec![0.0; m * k];
                matmul_into(gd, &bt, &mut ga, m, n, k);
                accumulate(grads, a, Tensor::from_parts(vec![m, k], ga));
            }
            if needs(b) {
                let at = transpose_data(av.data(), m, k);
                let mut gb = vec![0.0; k * n];
                matmul_into(&at, gd, &mut gb, k, m, n);
                accumulate(grads, b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let d = transpose_data(gd, r, c);
            accumulate(grads, a, Tensor::from_parts(vec![c, r], d));
        }
        &Op::Reshape(a) => {
            accumulate(grads, a, Tensor::from_parts(val(a).shape().to_vec(), gd.to_vec()));
        }
        &Op::AddRow(a, r) => {
            if needs(a) {
                accumulate(grads, a, g.clone());
            }
            if needs(r) {
                let cols = y.cols();
                let mut gr = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    for (o, v) in gr.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, r, Tensor::from_parts(val(r).shape().to_vec(), gr));
            }
        }
        &Op::MulCol(a, c) => {
            let (av, cv) = (val(a), val(c));
            let cols = y.cols();
            if needs(a) {
                let mut ga = gd.to_vec();
                for (i, row) in ga.chunks_mut(cols).enumerate() {
                    let s = cv.data()[i];
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if needs(c) {
                let gc = gd
                    .chunks(cols)
                    .zip(av.data().chunks(cols))
                    .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                    .collect();
                accumulate(grads, c, Tensor::from_parts(cv.shape().to_vec(), gc));
            }
        }
        &Op::SumAll(a) => {
            let av = val(a);
            accumulate(grads, a, Tensor::full(av.shape().to_vec(), gd[0]));
        }
        &Op::SumRows(a) => {
            let av = val(a);
            let (m, n) = (av.rows(), av.cols());
            let mut ga = Vec::with_capacity(m * n);
            for _ in 0..m {
                ga.extend_from_slice(gd);
            }
            accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        &Op::SumCols(a) => {
            let av = val(a);
            let n = av.cols();
            let ga = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
            accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        &Op::Softmax { src, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let yd = y.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, src, Tensor::from_parts(y.shape().to_vec(), gx));
        }
        &Op::LogSoftmax(src) => {
            let cols = y.cols();
            let mut gx = vec![0.0; gd.len()];
            for ((out, g), lp) in gx.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.data().chunks(cols)) {
                let total: f64 = g.iter().sum();
                for ((o, g), lp) in out.iter_mut().zip(g).zip(lp) {
                    *o = g - lp.exp() * total;
                }
            }
            accumulate(grads, src, Tensor::from_parts(y.shape().to_vec(), gx));
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            let total = y.shape()[*axis] * inner;
            for &p in parts {
                let pv = val(p);
                let chunk = pv.shape()[*axis] * inner;
                if needs(p) {
                    let mut gp = Vec::with_capacity(pv.len());
                    for o in 0..outer {
                        let start = o * total + offset;
                        gp.extend_from_slice(&gd[start..start + chunk]);
                    }
                    accumulate(grads, p, Tensor::from_parts(pv.shape().to_vec(), gp));
                }
                offset += chunk;
            }
        }
        &Op::Slice { src, axis, start } => {
            let sv = val(src);
            let (outer, len, inner) = split_axis(sv.shape(), axis);
            let taken = y.shape()[axis];
            let mut gs = vec![0.0; sv.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                let from = o * taken * inner;
                gs[dst..dst + taken * inner].copy_from_slice(&gd[from..from + taken * inner]);
            }
            accumulate(grads, src, Tensor::from_parts(sv.shape().to_vec(), gs));
        }
        &Op::RepeatRows(a, times) => {
            let av = val(a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (r, row) in gd.chunks(cols).enumerate() {
                let dst = &mut ga[(r / times) * cols..(r / times + 1) * cols];
                dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        &Op::TileRows(a) => {
            let av = val(a);
            let block = av.len();
            let mut ga = vec![0.0; block];
            for chunk in gd.chunks(block) {
                ga.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
            }
            accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        &Op::GroupSumRows(a) => {
            let av = val(a);
            let cols = av.cols();
            let per = av.rows() / y.rows();
            let mut ga = Vec::with_capacity(av.len());
            for r in 0..av.rows() {
                let grow = &gd[(r / per) * cols..(r / per + 1) * cols];
                ga.extend_from_slice(grow);
            }
            accumulate(grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
        }
        Op::NormalizeRows { src, norms } => {
            let cols = y.cols();
            let mut gx = vec![0.0; gd.len()];
            for (r, out) in gx.chunks_mut(cols).enumerate() {
                let yr = y.row(r);
                let gr = &gd[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, g), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = (g - yv * dot) / norms[r];
                }
            }
            accumulate(grads, *src, Tensor::from_parts(y.shape().to_vec(), gx));
        }
        Op::Attention { q, k, v, groups, heads, probs } => {
            let (gq, gk, gv) =
                attention_backward(val(*q), val(*k), val(*v), gd, probs, *groups, *heads);
            if needs(*q) {
                accumulate(grads, *q, gq);
            }
            if needs(*k) {
                accumulate(grads, *k, gk);
            }
            if needs(*v) {
                accumulate(grads, *v, gv);
            }
        }
    }
}

/// Head `h` columns of rows `[r0, r0 + n)` as a dense `n x w` block.
fn head_block(x: &Tensor, r0: usize, n: usize, h: usize, w: usize) -> Vec<f64> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(n * w);
    for r in r0..r0 + n {
        out.extend_from_slice(&x.data()[r * cols + h * w..r * cols + (h + 1) * w]);
    }
    out
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: usize,
    heads: usize,
) -> (Tensor, Vec<f64>) {
    let rows = q.rows();
    let n = rows / groups;
    let width = q.cols() / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut out = vec![0.0; rows * q.cols()];
    let mut probs = Vec::with_capacity(groups * heads * n * n);
    for g in 0..groups {
        for h in 0..heads {
            let qb = head_block(q, g * n, n, h, width);
            let kb = head_block(k, g * n, n, h, width);
            let vb = head_block(v, g * n, n, h, width);
            let kt = transpose_data(&kb, n, width);
            let mut scores = vec![0.0; n * n];
            matmul_into(&qb, &kt, &mut scores, n, width, n);
            scores.iter_mut().for_each(|s| *s *= scale);
            let attn = softmax_along(&Tensor::from_parts(vec![n, n], scores), 1).into_data();
            let mut ob = vec![0.0; n * width];
            matmul_into(&attn, &vb, &mut ob, n, n, width);
            for i in 0..n {
                let dst = (g * n + i) * q.cols() + h * width;
                out[dst..dst + width].copy_from_slice(&ob[i * width..(i + 1) * width]);
            }
            probs.extend_from_slice(&attn);
        }
    }
    (Tensor::from_parts(q.shape().to_vec(), out), probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &[f64],
    probs: &[f64],
    groups: usize,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let rows = q.rows();
    let cols = q.cols();
    let n = rows / groups;
    let width = cols / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let (mut gq, mut gk, mut gv) = (vec![0.0; q.len()], vec![0.0; q.len()], vec![0.0; q.len()]);
    let gt = Tensor::from_parts(q.shape().to_vec(), g.to_vec());
    for grp in 0..groups {
        for h in 0..heads {
            let attn = &probs[(grp * heads + h) * n * n..(grp * heads + h + 1) * n * n];
            let qb = head_block(q, grp * n, n, h, width);
            let kb = head_block(k, grp * n, n, h, width);
            let vb = head_block(v, grp * n, n, h, width);
            let gob = head_block(&gt, grp * n, n, h, width);
            // dV = A^T dO
            let at = transpose_data(attn, n, n);
            let mut gvb = vec![0.0; n * width];
            matmul_into(&at, &gob, &mut gvb, n, n, width);
            // dA = dO V^T, then through the row softmax
            let vt = transpose_data(&vb, n, width);
            let mut ga = vec![0.0; n * n];
            matmul_into(&gob, &vt, &mut ga, n, width, n);
            let mut gs = vec![0.0; n * n];
            for i in 0..n {
                let row = i * n..(i + 1) * n;
                let dot: f64 = ga[row.clone()].iter().zip(&attn[row.clone()]).map(|(a, b)| a * b).sum();
                for j in row {
                    gs[j] = attn[j] * (ga[j] - dot) * scale;
                }
            }
            let mut gqb = vec![0.0; n * width];
            matmul_into(&gs, &kb, &mut gqb, n, n, width);
            let gst = transpose_data(&gs, n, n);
            let mut gkb = vec![0.0; n * width];
            matmul_into(&gst, &qb, &mut gkb, n, n, width);
            for i in 0..n {
                let dst = (grp * n + i) * cols + h * width;
                let src = i * width..(i + 1) * width;
                gq[dst..dst + width].copy_from_slice(&gqb[src.clone()]);
                gk[dst..dst + width].copy_from_slice(&gkb[src.clone()]);
                gv[dst..dst + width].copy_from_slice(&gvb[src]);
            }
        }
    }
    let shape = q.shape().to_vec();
    (
        Tensor::from_parts(shape.clone(), gq),
        Tensor::from_parts(shape.clone(), gk),
        Tensor::from_parts(shape, gv),
    )
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.needs_grad();
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let needs = self.needs_grad() || other.needs_grad();
        self.tape.push(value, op, needs)
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (a, b) = (self.value(), other.value());
        let (shape, n) = broadcast_pair(name, &a, &b)?;
        let data = (0..n).map(|i| f(bget(&a, i), bget(&b, i))).collect();
        Ok((Tensor::from_parts(shape.clone(), data), shape))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, _) = self.elementwise(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let (v, _) = self.elementwise(other, "div", |a, b| a / b)?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    /// ELU with alpha = 1.
    pub fn elu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.unary(v, Op::Elu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let v = x.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        let v = x.map(f64::sqrt);
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor));
        self.unary(v, Op::ClampMin(self.id, floor))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        if x.rank() != 2 || r.len() != x.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", x.shape(), r.shape())));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(x.cols()) {
            chunk.iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (x, c) = (self.value(), col.value());
        if x.rank() != 2 || c.len() != x.rows() {
            return Err(Error::dim("mul_col", format!("{:?} * col {:?}", x.shape(), c.shape())));
        }
        let mut data = x.data().to_vec();
        for (chunk, s) in data.chunks_mut(x.cols()).zip(c.data()) {
            chunk.iter_mut().for_each(|a| *a *= s);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums of a matrix, shape `[1, cols]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("sum_rows", format!("rank {}", x.rank())));
        }
        let mut out = vec![0.0; x.cols()];
        for row in x.data().chunks(x.cols()) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let v = Tensor::from_parts(vec![1, x.cols()], out);
        Ok(self.unary(v, Op::SumRows(self.id)))
    }

    /// Row sums of a matrix, shape `[rows, 1]`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("sum_cols", format!("rank {}", x.rank())));
        }
        let out = x.data().chunks(x.cols()).map(|r| r.iter().sum()).collect();
        let v = Tensor::from_parts(vec![x.rows(), 1], out);
        Ok(self.unary(v, Op::SumCols(self.id)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank().max(1) {
            return Err(Error::Axis { axis, rank: x.rank() });
        }
        let v = if x.rank() == 0 { Tensor::scalar(1.0) } else { softmax_along(&x, axis) };
        let axis = axis.min(x.rank().saturating_sub(1));
        Ok(self.unary(v, Op::Softmax { src: self.id, axis }))
    }

    /// Row-wise log-softmax of a matrix (or a vector viewed as one row).
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.unary(v, Op::LogSoftmax(self.id))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Axis { axis, rank: x.rank() });
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if start + len > full {
            return Err(Error::dim("slice", format!("{start}+{len} > {full}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::from_parts(shape, data);
        Ok(self.unary(v, Op::Slice { src: self.id, axis, start }))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Each row repeated `times` times consecutively: `[a, a, b, b]`.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("repeat_rows", format!("rank {}", x.rank())));
        }
        let mut data = Vec::with_capacity(x.len() * times);
        for row in x.data().chunks(x.cols()) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let v = Tensor::from_parts(vec![x.rows() * times, x.cols()], data);
        Ok(self.unary(v, Op::RepeatRows(self.id, times)))
    }

    /// The whole matrix stacked `times` times: `[a, b, a, b]`.
    pub fn tile_rows(self, times: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("tile_rows", format!("rank {}", x.rank())));
        }
        let data = x.data().repeat(times);
        let v = Tensor::from_parts(vec![x.rows() * times, x.cols()], data);
        Ok(self.unary(v, Op::TileRows(self.id)))
    }

    /// Sums consecutive blocks of `rows / groups` rows: `(G*n) x c -> G x c`.
    pub fn group_sum_rows(self, groups: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || groups == 0 || !x.rows().is_multiple_of(groups) {
            return Err(Error::dim("group_sum_rows", format!("{:?} into {groups}", x.shape())));
        }
        let per = x.rows() / groups;
        let cols = x.cols();
        let mut out = vec![0.0; groups * cols];
        for (r, row) in x.data().chunks(cols).enumerate() {
            let dst = &mut out[(r / per) * cols..(r / per + 1) * cols];
            dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let v = Tensor::from_parts(vec![groups, cols], out);
        Ok(self.unary(v, Op::GroupSumRows(self.id)))
    }

    /// Each row scaled to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let cols = x.cols();
        let norms: Vec<f64> =
            x.data().chunks(cols).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if let Some(r) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::domain("normalize_rows", format!("row {r} has zero norm")));
        }
        let data = x
            .data()
            .chunks(cols)
            .zip(&norms)
            .flat_map(|(row, n)| row.iter().map(move |v| v / n))
            .collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.unary(v, Op::NormalizeRows { src: self.id, norms }))
    }

    /// Scaled dot-product attention run independently inside each of
    /// `groups` equal row blocks and each of `heads` equal column blocks.
    /// `self` is the query projection; `key` and `value` share its shape.
    pub fn grouped_attention(
        self,
        key: Var<'t>,
        value: Var<'t>,
        groups: usize,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), key.value(), value.value());
        if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::dim("attention", format!("{:?} {:?} {:?}", q.shape(), k.shape(), v.shape())));
        }
        if groups == 0 || heads == 0 || q.rows() % groups != 0 || q.cols() % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("{:?} into {groups} groups x {heads} heads", q.shape()),
            ));
        }
        let (out, probs) = attention_forward(&q, &k, &v, groups, heads);
        let needs = self.needs_grad() || key.needs_grad() || value.needs_grad();
        let op = Op::Attention { q: self.id, k: key.id, v: value.id, groups, heads, probs };
        Ok(self.tape.push(out, op, needs))
    }

    /// Cosine similarity of two equal-length tensors, as a scalar.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        let dot = self.mul(other)?.sum();
        let na = self.square().sum().sqrt()?;
        let nb = other.square().sum().sqrt()?;
        let denom = na.mul(nb)?;
        dot.div(denom).map_err(|_| Error::domain("cosine_similarity", "zero-norm input"))
    }
}
