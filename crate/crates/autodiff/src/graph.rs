use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Derivative of an element-wise map, given the input and the output value.
pub type MapDeriv = fn(f64, f64) -> f64;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Map(Var, MapDeriv),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Lookup(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    L1RowDiff(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Node creation order is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::ForeignVar(v.0))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.node(v)?.value.dims(op)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.to_vec()).expect("gradient matches its node's shape")
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a, "matmul")?;
        let (k2, c) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                add_scaled(row, &bv[p * c..(p + 1) * c], x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// `a[r, c] + bias[1, c]`, the bias repeated over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "add_row")?;
        let (br, bc) = self.dims(bias, "add_row")?;
        if br != 1 || bc != c {
            return Err(self.mismatch("add_row", a, bias));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = av.to_vec();
        for i in 0..r {
            add_into(&mut out[i * c..(i + 1) * c], bv);
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, op, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Element-wise `f` with a caller-supplied derivative `df(x, f(x))`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: MapDeriv) -> Result<Var> {
        self.unary(x, f, Op::Map(x, df))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "softmax")?;
        let xv = &self.nodes[x.0].value;
        let mut out = xv.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Column-wise concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::OutOfRange {
            op: "concat",
            index: 0,
            len: 0,
        })?;
        let (r, _) = self.dims(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat")?;
            if pr != r {
                return Err(self.mismatch("concat", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let out = self.nodes[x.0].value.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row `index` of an embedding table, as a `1 x cols` tensor.
    pub fn lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let (r, c) = self.dims(table, "lookup")?;
        if index >= r {
            return Err(Error::OutOfRange {
                op: "lookup",
                index,
                len: r,
            });
        }
        let row = self.nodes[table.0].value.data()[index * c..(index + 1) * c].to_vec();
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![1, c], row)?, Op::Lookup(table, index), rg))
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = self.nodes[logits.0].value.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if lv.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for (&z, &y) in lv.data().iter().zip(targets) {
            loss += softplus(z) - y * z;
            probs.push(sigmoid(z));
        }
        let rg = self.rg(logits);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// `sum_{n >= 1} sum_j |x[n, j] - x[n - 1, j]|`; zero for a single row.
    pub fn l1_row_diff(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "l1_row_diff")?;
        let xv = self.nodes[x.0].value.data();
        let mut total = 0.0;
        for n in 1..r {
            for j in 0..c {
                total += (xv[n * c + j] - xv[(n - 1) * c + j]).abs();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::L1RowDiff(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "mean_rows")?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            add_into(&mut out, &xv[i * c..(i + 1) * c]);
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter.next().ok_or(Error::OutOfRange {
            op: "add_all",
            index: 0,
            len: 0,
        })?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar loss. Gradients are additive over paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let dims = |v: Var| nodes[v.0].value.dims("backward").expect("validated in forward");
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (r, k) = dims(*a);
            let (_, c) = dims(*b);
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = acc(nodes, grads, *a) {
                for row in 0..r {
                    let grow = &g[row * c..(row + 1) * c];
                    for p in 0..k {
                        da[row * k + p] += dot(grow, &bv[p * c..(p + 1) * c]);
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for row in 0..r {
                    let grow = &g[row * c..(row + 1) * c];
                    for p in 0..k {
                        let x = av[row * k + p];
                        if x != 0.0 {
                            add_scaled(&mut db[p * c..(p + 1) * c], grow, x);
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                add_scaled(db, g, -1.0);
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            let c = nodes[bias.0].value.len();
            if let Some(db) = acc(nodes, grads, *bias) {
                for chunk in g.chunks(c) {
                    add_into(db, chunk);
                }
            }
        }
        Op::Hadamard(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::Affine(x, k) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                add_scaled(dx, g, *k);
            }
        }
        Op::Sigmoid(x) => {
            let y = nodes[i].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Tanh(x) => {
            let y = nodes[i].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Map(x, df) => {
            let (xs, y) = (val(*x), nodes[i].value.data());
            if let Some(dx) = acc(nodes, grads, *x) {
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[j] * df(xs[j], y[j]);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let y = nodes[i].value.data();
            let (_, c) = dims(*x);
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let inner = dot(gr, yr);
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = nodes[i].value.dims("concat").expect("validated in forward");
            let mut offset = 0;
            for &p in parts {
                let (_, w) = dims(p);
                if let Some(dp) = acc(nodes, grads, p) {
                    for row in 0..r {
                        add_into(
                            &mut dp[row * w..(row + 1) * w],
                            &g[row * total + offset..row * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(x, start) => {
            let (r, len) = nodes[i].value.dims("slice_cols").expect("validated in forward");
            let (_, c) = dims(*x);
            if let Some(dx) = acc(nodes, grads, *x) {
                for row in 0..r {
                    add_into(
                        &mut dx[row * c + start..row * c + start + len],
                        &g[row * len..(row + 1) * len],
                    );
                }
            }
        }
        Op::SliceRows(x, start) => {
            let (_, c) = dims(*x);
            if let Some(dx) = acc(nodes, grads, *x) {
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::Lookup(table, index) => {
            let c = g.len();
            if let Some(dt) = acc(nodes, grads, *table) {
                add_into(&mut dt[index * c..(index + 1) * c], g);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = probs.len() / targets.len();
            if let Some(dl) = acc(nodes, grads, *logits) {
                add_scaled(dl, probs, g[0]);
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * c + t] -= g[0];
                }
            }
        }
        Op::BceWithLogits { logits, targets, probs } => {
            if let Some(dl) = acc(nodes, grads, *logits) {
                for ((d, p), y) in dl.iter_mut().zip(probs).zip(targets) {
                    *d += g[0] * (p - y);
                }
            }
        }
        Op::L1RowDiff(x) => {
            let (r, c) = dims(*x);
            let xv = val(*x);
            if let Some(dx) = acc(nodes, grads, *x) {
                for n in 1..r {
                    for j in 0..c {
                        let diff = xv[n * c + j] - xv[(n - 1) * c + j];
                        // subgradient 0 at the kink
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dx[n * c + j] += g[0] * s;
                        dx[(n - 1) * c + j] -= g[0] * s;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let k = g[0] / dx.len() as f64;
                for d in dx.iter_mut() {
                    *d += k;
                }
            }
        }
        Op::MeanRows(x) => {
            let c = g.len();
            if let Some(dx) = acc(nodes, grads, *x) {
                let r = dx.len() / c;
                for row in dx.chunks_mut(c) {
                    add_scaled(row, g, 1.0 / r as f64);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![3.0; 4]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_matches_hand_arithmetic() {
        // [[1, 2, 3], [4, 5, 6]] x [[1], [0], [-1]] = [[-2], [-2]]
        let mut g = Graph::new();
        let a = g.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(3, 1, &[1.0, 0.0, -1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(t(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_w() {
        let data = [1.0, -2.0, 3.0, 0.5];
        let mut g = Graph::new();
        let w = g.param(t(2, 2, &data));
        let sq = g.hadamard(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(w).unwrap(), expected.as_slice());
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = sum(3w) + sum(w) -> grad 4
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![1.0, 2.0]));
        let a = g.scale(w, 3.0).unwrap();
        let s1 = g.sum(a).unwrap();
        let s2 = g.sum(w).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Detached)));
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(loss).unwrap();
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row(vec![3.0, 4.0]));
        let p = g.hadamard(w, c).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::row(vec![0.0, 0.0, 0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-15);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(logits).unwrap(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn bce_matches_log_form() {
        let z = [0.3, -1.2];
        let y = [1.0, 0.0];
        let mut g = Graph::new();
        let logits = g.param(Tensor::row(z.to_vec()));
        let loss = g.bce_with_logits(logits, &y).unwrap();
        let p: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
        let expected = -(p[0].ln() + (1.0 - p[1]).ln());
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn l1_row_diff_telescopes_to_zero_on_constant_rows() {
        let mut g = Graph::new();
        let x = g.param(t(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let l = g.l1_row_diff(x).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let y = g.constant(t(3, 1, &[0.0, 1.0, -1.0]));
        let l2 = g.l1_row_diff(y).unwrap();
        assert_eq!(g.scalar(l2), 3.0);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.param(t(2, 1, &[1.0, 2.0]));
        let b = g.param(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice_cols(c, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), g.value(b).data());
        let r = g.slice_rows(c, 1, 1).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 5.0, 6.0]);
        assert!(g.slice_cols(c, 2, 2).is_err());
    }

    #[test]
    fn add_row_broadcasts_bias_only() {
        let mut g = Graph::new();
        let a = g.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(Tensor::row(vec![10.0, 20.0]));
        let y = g.add_row(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
        let bad = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(g.add_row(a, bad).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn lookup_scatters_gradient_into_one_row() {
        let mut g = Graph::new();
        let table = g.param(t(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let row = g.lookup(table, 1).unwrap();
        assert_eq!(g.value(row).data(), &[2.0, 3.0]);
        let loss = g.sum(row).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(g.lookup(table, 3).is_err());
    }
}
