//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value. `backward`
//! walks the nodes from the loss down to index 0, so each recorded operation
//! is visited exactly once. Tensors used more than once receive the sum of
//! the gradient contributions from every use.

use super::tensor::{dot, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    GatherRows { src: Var, indices: Vec<usize> },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it participates in differentiation iff
    /// `t.requires_grad()` is set. Any existing gradient on `t` is dropped.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs = t.requires_grad();
        t.clear_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = match sa {
            [m, k] => (*m, *k),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let n = match sb {
            [k2, n] if *k2 == k => *n,
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// `a[m,n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if ta.shape().len() != 2 || tb.len() != n || as_matrix(tb.shape()).map(|s| s.0) != Some(1) {
            return Err(shape_err("add_bias", ta.shape(), tb.shape()));
        }
        let b = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |x| x * factor);
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let needs = self.needs(&[a]);
        self.push(t, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let needs = self.needs(&[a]);
        self.push(t, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let needs = self.needs(&[a]);
        self.push(t, Op::Relu(a), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new([rows, total], data)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 || len == 0 || start + len > t.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let needs = self.needs(&[src]);
        Ok(self.push(Tensor::new([rows, len], data)?, Op::SliceCols { src, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new([rows, cols], data)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 || len == 0 || start + len > t.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(&[src]);
        Ok(self.push(Tensor::new([len, c], data)?, Op::SliceRows { src, start }, needs))
    }

    /// Row gather: output row `i` is `src` row `indices[i]`. Serves both
    /// embedding lookup and row permutation.
    pub fn gather_rows(&mut self, src: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(Error::Dimension(format!("gather_rows on shape {:?}", t.shape())));
        }
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([indices.len(), c], data)?;
        let needs = self.needs(&[src]);
        Ok(self.push(out, Op::GatherRows { src, indices }, needs))
    }

    pub fn reshape(&mut self, src: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(src).data().to_vec())?;
        let needs = self.needs(&[src]);
        Ok(self.push(t, Op::Reshape(src), needs))
    }

    /// Per-row softmax cross-entropy in nats: output `[m]` with
    /// `out[i] = -ln softmax(logits[i])[targets[i]]`, stabilised by
    /// subtracting the row maximum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, c) = as_matrix(t.shape())
            .ok_or_else(|| Error::Dimension(format!("cross_entropy on shape {:?}", t.shape())))?;
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "cross_entropy: {m} logit rows but {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut losses = vec![0.0; m];
        for (i, &target) in targets.iter().enumerate() {
            if target >= c {
                return Err(Error::Index(format!("target class {target} with {c} classes")));
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (p, &l) in p.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            p.iter_mut().for_each(|v| *v /= z);
            losses[i] = z.ln() - (row[target] - max);
        }
        let needs = self.needs(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::new([m], losses)?, op, needs))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into the gradient slot of `v` if it needs one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                with(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(g_row, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                with(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ta.data()[i * k + p];
                            let gb_row = &mut gb[p * n..(p + 1) * n];
                            gb_row.iter_mut().zip(g_row).for_each(|(x, &y)| *x += a_ip * y);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| {
                    for row in g.chunks(gb.len()) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(*a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                with(*b, &mut |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, f) => with(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += f * y);
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                with(*a, &mut |ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                with(*a, &mut |ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu(a) => {
                let input = nodes[a.0].value.data();
                with(*a, &mut |ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(input) {
                        if xi > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    with(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let w = node.value.cols();
                let full = nodes[src.0].value.cols();
                with(*src, &mut |gs| {
                    for (r, g_row) in g.chunks(w).enumerate() {
                        add_into(&mut gs[r * full + start..r * full + start + w], g_row);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    with(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                let c = node.value.cols();
                with(*src, &mut |gs| add_into(&mut gs[start * c..start * c + g.len()], g));
            }
            Op::GatherRows { src, indices } => {
                let c = node.value.cols();
                with(*src, &mut |gs| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gs[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(src) => with(*src, &mut |gs| add_into(gs, g)),
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.cols();
                with(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &mut gl[i * c..(i + 1) * c];
                        let p = &probs[i * c..(i + 1) * c];
                        for (x, &pi) in row.iter_mut().zip(p) {
                            *x += g[i] * pi;
                        }
                        row[t] -= g[i];
                    }
                });
            }
            Op::Sum(a) => with(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
