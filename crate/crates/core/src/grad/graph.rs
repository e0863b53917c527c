use std::collections::HashMap;

use super::tensor::{matmul, Tensor};
use super::{GradError, ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    KlDiagGaussian(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Values are computed eagerly; `backward` walks the list in
/// reverse. Leaf gradients persist on the graph and accumulate across calls until
/// [`Graph::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Repeated binds of the
    /// same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the gradients of all bound parameters into the store's grad buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut bound: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        bound.sort_by_key(|(id, _)| id.0);
        for (id, v) in bound {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `a [n,m] + b [1,m]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows() != 1 || y.cols() != x.cols() || x.shape().len() != 2 {
            return Err(mismatch("add_row", x, y));
        }
        let m = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += y.data()[i % m];
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
            return Err(mismatch("matmul", x, y));
        }
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        let t = Tensor::matrix(n, m, matmul(x.data(), y.data(), n, k, m))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(m) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    // ----- reductions and reshaping -----

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// `[n,m] -> [1,m]` column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = Tensor::row(column_sums(self.value(a)));
        let rg = self.rg(a);
        self.push(t, Op::SumRows(a), rg)
    }

    /// `[n,m] -> [1,m]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let t = Tensor::row(column_sums(x).into_iter().map(|v| v / n).collect());
        let rg = self.rg(a);
        self.push(t, Op::MeanRows(a), rg)
    }

    /// `[1,m] -> [n,m]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, GradError> {
        let x = self.value(a);
        if x.rows() != 1 || n == 0 {
            return Err(GradError::InvalidArgument("repeat_rows needs a single-row input and n > 0"));
        }
        let m = x.cols();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let t = Tensor::matrix(n, m, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::RepeatRows(a), rg))
    }

    /// Picks `a[r, idx[r]]` for each row, giving `[n,1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, GradError> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= x.cols()) {
            return Err(GradError::InvalidArgument("gather index count or range"));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let t = Tensor::matrix(idx.len(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gather(a, idx.to_vec()), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::InvalidArgument("concat of nothing"))?;
        let n = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != n {
                return Err(mismatch("concat", self.value(*first), v));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::matrix(n, m, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::InvalidArgument("concat of nothing"))?;
        let m = self.value(*first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != m {
                return Err(mismatch("concat_rows", self.value(*first), v));
            }
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(n, m, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(GradError::InvalidArgument("slice_cols range"));
        }
        let n = x.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(n, end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, start), rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(GradError::InvalidArgument("slice_rows range"));
        }
        let m = x.cols();
        let t = Tensor::matrix(end - start, m, x.data()[start * m..end * m].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ----- losses (all scalar, averaged over rows) -----

    /// `(1/n) sum_rows ||p - t||_1`.
    pub fn l1_loss(&mut self, p: Var, t: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(p), self.value(t));
        if x.shape() != y.shape() {
            return Err(mismatch("l1_loss", x, y));
        }
        let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
        let out = Tensor::scalar(s / x.rows() as f64);
        let rg = self.rg(p) || self.rg(t);
        Ok(self.push(out, Op::L1Loss(p, t), rg))
    }

    /// `(1/n) sum_rows ||p - t||_2^2`.
    pub fn mse_loss(&mut self, p: Var, t: Var) -> Result<Var, GradError> {
        let (x, y) = (self.value(p), self.value(t));
        if x.shape() != y.shape() {
            return Err(mismatch("mse_loss", x, y));
        }
        let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / x.rows() as f64);
        let rg = self.rg(p) || self.rg(t);
        Ok(self.push(out, Op::MseLoss(p, t), rg))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GradError> {
        let x = self.value(logits);
        if targets.len() != x.rows() || targets.iter().any(|&c| c >= x.cols()) {
            return Err(GradError::InvalidArgument("cross_entropy target count or range"));
        }
        let mut s = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = x.row_slice(r);
            s += log_sum_exp(row) - row[c];
        }
        let out = Tensor::scalar(s / x.rows() as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))`, summed over dimensions and averaged over rows.
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var, GradError> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() {
            return Err(mismatch("kl_diag_gaussian", m, lv));
        }
        let s: f64 = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&u, &l)| 0.5 * (u * u + l.exp() - 1.0 - l))
            .sum();
        let out = Tensor::scalar(s / m.rows() as f64);
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(out, Op::KlDiagGaussian(mu, logvar), rg))
    }

    // ----- backward -----

    /// Propagates gradients from a scalar `loss` to every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, zip(val(*b), &|bv, gv| bv * gv));
                send(*b, zip(val(*a), &|av, gv| av * gv));
            }
            Op::Scale(a, k) => send(*a, g.map(|v| v * k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                send(*b, Tensor::row(column_sums(g)));
            }
            Op::MatMul(a, b) => {
                let (x, w) = (val(*a), val(*b));
                let (n, k, m) = (x.rows(), x.cols(), w.cols());
                if nodes[a.0].requires_grad {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &w.data()[p * m..(p + 1) * m];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                        }
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), ga).expect("shape"));
                }
                if nodes[b.0].requires_grad {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let av = x.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    send(*b, Tensor::new(w.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::Tanh(a) => send(*a, zip(y, &|yv, gv| gv * (1.0 - yv * yv))),
            Op::Relu(a) => send(*a, zip(val(*a), &|xv, gv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Exp(a) => send(*a, zip(y, &|yv, gv| gv * yv)),
            Op::Log(a) => send(*a, zip(val(*a), &|xv, gv| gv / xv)),
            Op::Sqrt(a) => send(*a, zip(y, &|yv, gv| gv * 0.5 / yv)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    zip(val(*a), &move |xv, gv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                )
            }
            Op::Softmax(a) => {
                let m = y.cols();
                let mut out = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                    for c in 0..m {
                        out[r * m + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::LogSoftmax(a) => {
                let m = y.cols();
                let mut out = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let gs: f64 = gr.iter().sum();
                    for c in 0..m {
                        out[r * m + c] = gr[c] - yr[c].exp() * gs;
                    }
                }
                send(*a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::Sum(a) => send(*a, Tensor::filled(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let x = val(*a);
                send(*a, Tensor::filled(x.shape(), g.item() / x.len() as f64))
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let x = val(*a);
                let k = if matches!(nodes[i].op, Op::MeanRows(_)) {
                    1.0 / x.rows() as f64
                } else {
                    1.0
                };
                let m = x.cols();
                let data = (0..x.len()).map(|j| g.data()[j % m] * k).collect();
                send(*a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::RepeatRows(a) => send(*a, Tensor::row(column_sums(g))),
            Op::Gather(a, idx) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.shape());
                let m = x.cols();
                for (r, &c) in idx.iter().enumerate() {
                    out.data_mut()[r * m + c] += g.data()[r];
                }
                send(*a, out);
            }
            Op::Concat(parts) => {
                let n = y.rows();
                let m = y.cols();
                let mut offset = 0;
                for p in parts {
                    let x = val(*p);
                    let w = x.cols();
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(&g.data()[r * m + offset..r * m + offset + w]);
                    }
                    send(*p, Tensor::new(x.shape().to_vec(), data).expect("shape"));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = val(*p);
                    let len = x.len();
                    let data = g.data()[offset..offset + len].to_vec();
                    send(*p, Tensor::new(x.shape().to_vec(), data).expect("shape"));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.shape());
                let (m, w) = (x.cols(), y.cols());
                for r in 0..y.rows() {
                    out.data_mut()[r * m + start..r * m + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                send(*a, out);
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.shape());
                let m = x.cols();
                out.data_mut()[start * m..start * m + g.len()].copy_from_slice(g.data());
                send(*a, out);
            }
            Op::Reshape(a) => {
                let x = val(*a);
                send(*a, g.reshaped(x.shape().to_vec()).expect("shape"));
            }
            Op::L1Loss(p, t) => {
                let (x, z) = (val(*p), val(*t));
                let k = g.item() / x.rows() as f64;
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(z.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let gp = Tensor::new(x.shape().to_vec(), data).expect("shape");
                send(*t, gp.map(|v| -v));
                send(*p, gp);
            }
            Op::MseLoss(p, t) => {
                let (x, z) = (val(*p), val(*t));
                let k = 2.0 * g.item() / x.rows() as f64;
                let data = x.data().iter().zip(z.data()).map(|(a, b)| k * (a - b)).collect();
                let gp = Tensor::new(x.shape().to_vec(), data).expect("shape");
                send(*t, gp.map(|v| -v));
                send(*p, gp);
            }
            Op::CrossEntropy(a, targets) => {
                let x = val(*a);
                let m = x.cols();
                let k = g.item() / x.rows() as f64;
                let mut out = vec![0.0; x.len()];
                for (r, &c) in targets.iter().enumerate() {
                    let row = x.row_slice(r);
                    let lse = log_sum_exp(row);
                    for j in 0..m {
                        out[r * m + j] = k * ((row[j] - lse).exp() - if j == c { 1.0 } else { 0.0 });
                    }
                }
                send(*a, Tensor::new(x.shape().to_vec(), out).expect("shape"));
            }
            Op::KlDiagGaussian(mu, lv) => {
                let (m, l) = (val(*mu), val(*lv));
                let k = g.item() / m.rows() as f64;
                send(*mu, m.map(|u| k * u));
                send(*lv, l.map(|v| k * 0.5 * (v.exp() - 1.0)));
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn column_sums(x: &Tensor) -> Vec<f64> {
    let m = x.cols();
    let mut out = vec![0.0; m];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
            *o += v;
        }
    }
    out
}
