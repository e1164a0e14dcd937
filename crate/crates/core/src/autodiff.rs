//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Nodes are
//! referenced by [`Var`] handles; `backward` walks the tape in reverse and
//! returns the adjoint of every node with respect to a scalar root.

use crate::tensor::{dot, Tensor};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-9;

/// Smoothing constant of the signed square root used by bilinear pooling.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    TMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddRowOffset(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    SignedSqrt(Var),
    L2Normalize(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    StackRows(Vec<Var>),
    Slice(Var, usize, usize),
    Row(Var, usize),
    Col(Var, usize),
    MeanRows(Var),
    Transpose(Var),
    SumPool(Var, usize),
    Sum(Var),
    Pick(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let yg = dot(y, g);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - yg);
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Records a leaf. Gradients are produced for leaves like any other node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vector(&mut self, values: &[f64]) -> Var {
        self.leaf(Tensor::vector(values))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Tensor::zeros(rows, cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    /// `a^T * b`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t_matmul(self.value(b));
        self.push(v, Op::TMatMul(a, b))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.shape(),
            y.shape(),
            "elementwise shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_values(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the column vector `bias` (length `n`) to every row of `a` (`m x n`).
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (n, 1), "row bias shape mismatch");
        let mut out = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..m {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRowBias(a, bias))
    }

    /// Adds `offset[r]` to every entry of row `r` of `a` (`m x n`, offset `m x 1`).
    pub fn add_row_offset(&mut self, a: Var, offset: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(offset), (m, 1), "row offset shape mismatch");
        let mut out = self.value(a).clone();
        let s = self.value(offset).as_slice().to_vec();
        for (r, sv) in s.iter().enumerate() {
            for o in out.row_mut(r) {
                *o += sv;
            }
        }
        self.push(out, Op::AddRowOffset(a, offset))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(v, Op::Log(a))
    }

    /// `sign(x) * (sqrt(|x| + eps) - sqrt(eps))`; zero maps to zero.
    pub fn signed_sqrt(&mut self, a: Var) -> Var {
        let base = SIGNED_SQRT_EPS.sqrt();
        let v = self.value(a).map(|x| {
            if x == 0.0 {
                0.0
            } else {
                x.signum() * ((x.abs() + SIGNED_SQRT_EPS).sqrt() - base)
            }
        });
        self.push(v, Op::SignedSqrt(a))
    }

    /// Divides by the Euclidean norm; the zero tensor maps to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norm = x.norm_sq().sqrt();
        let v = if norm > 0.0 {
            x.map(|e| e / norm)
        } else {
            Tensor::zeros(x.rows(), x.cols())
        };
        self.push(v, Op::L2Normalize(a))
    }

    /// Softmax over all entries (intended for column vectors).
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        softmax_in_place(v.as_mut_slice());
        self.push(v, Op::Softmax(a))
    }

    /// Independent softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Stacks tensors with equal column counts on top of each other. For
    /// column vectors this is concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.as_slice());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::VStack(parts.to_vec()))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "hconcat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(out, Op::HStack(parts.to_vec()))
    }

    /// Turns column vectors of equal length into the rows of a matrix.
    pub fn stack_rows(&mut self, vectors: &[Var]) -> Var {
        let n = self.value(vectors[0]).len();
        let mut data = Vec::with_capacity(n * vectors.len());
        for &v in vectors {
            let t = self.value(v);
            assert_eq!(t.len(), n, "stack_rows length mismatch");
            data.extend_from_slice(t.as_slice());
        }
        self.push(
            Tensor::from_vec(vectors.len(), n, data),
            Op::StackRows(vectors.to_vec()),
        )
    }

    /// Rows `start..start+len` of a column vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "slice expects a column vector");
        let v = Tensor::vector(&t.as_slice()[start..start + len]);
        self.push(v, Op::Slice(a, start, len))
    }

    /// Row `r` of a matrix as a column vector.
    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let v = Tensor::vector(self.value(a).row(r));
        self.push(v, Op::Row(a, r))
    }

    /// Column `c` of a matrix as a column vector.
    pub fn col(&mut self, a: Var, c: usize) -> Var {
        let t = self.value(a);
        let vals: Vec<f64> = (0..t.rows()).map(|r| t.get(r, c)).collect();
        self.push(Tensor::vector(&vals), Op::Col(a, c))
    }

    /// Mean of the rows of an `m x n` matrix as an `n x 1` vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.shape();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::vector(&out), Op::MeanRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Sums consecutive windows of `k` entries of a vector of length `k * m`.
    pub fn sum_pool(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a).as_slice();
        assert_eq!(x.len() % k, 0, "sum_pool length not divisible by window");
        let v: Vec<f64> = x.chunks(k).map(|c| c.iter().sum()).collect();
        self.push(Tensor::vector(&v), Op::SumPool(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Entry `i` (flat, row-major) as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let s = self.value(a).as_slice()[i];
        self.push(Tensor::scalar(s), Op::Pick(a, i))
    }

    /// Sum of a list of equally shaped nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// `W x + b` for a weight `out x in`, column input and column bias.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let wx = self.matmul(w, x);
        self.add(wx, b)
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Adjoints {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Adjoints { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // out = A B ; dA = G B^T ; dB = A^T G
                let da = g.matmul_t(self.value(b));
                self.slot(grads, a).add_assign(&da);
                let db = self.value(a).t_matmul(g);
                self.slot(grads, b).add_assign(&db);
            }
            Op::MatMulT(a, b) => {
                // out = A B^T ; dA = G B ; dB = G^T A
                let da = g.matmul(self.value(b));
                self.slot(grads, a).add_assign(&da);
                let db = g.t_matmul(self.value(a));
                self.slot(grads, b).add_assign(&db);
            }
            Op::TMatMul(a, b) => {
                // out = A^T B ; dA = B G^T ; dB = A G
                let da = self.value(b).matmul_t(g);
                self.slot(grads, a).add_assign(&da);
                let db = self.value(a).matmul(g);
                self.slot(grads, b).add_assign(&db);
            }
            Op::Add(a, b) => {
                self.slot(grads, a).add_assign(g);
                self.slot(grads, b).add_assign(g);
            }
            Op::Sub(a, b) => {
                self.slot(grads, a).add_assign(g);
                let neg = g.map(|x| -x);
                self.slot(grads, b).add_assign(&neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let ga = self.slot(grads, a);
                for ((o, &gi), &y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vb.as_slice()) {
                    *o += gi * y;
                }
                let gb = self.slot(grads, b);
                for ((o, &gi), &x) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(va.as_slice()) {
                    *o += gi * x;
                }
            }
            Op::AddRowBias(a, bias) => {
                self.slot(grads, a).add_assign(g);
                let gb = self.slot(grads, bias).as_mut_slice();
                for r in 0..g.rows() {
                    for (o, x) in gb.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::AddRowOffset(a, offset) => {
                self.slot(grads, a).add_assign(g);
                let go = self.slot(grads, offset).as_mut_slice();
                for (r, o) in go.iter_mut().enumerate() {
                    *o += g.row(r).iter().sum::<f64>();
                }
            }
            Op::Scale(a, s) => {
                let ga = self.slot(grads, a).as_mut_slice();
                for (o, x) in ga.iter_mut().zip(g.as_slice()) {
                    *o += s * x;
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(s);
                let ds = dot(g.as_slice(), self.value(a).as_slice());
                let ga = self.slot(grads, a).as_mut_slice();
                for (o, x) in ga.iter_mut().zip(g.as_slice()) {
                    *o += sv * x;
                }
                self.slot(grads, s).as_mut_slice()[0] += ds;
            }
            Op::Sigmoid(a) => {
                let ga = self.slot(grads, a).as_mut_slice();
                for ((o, &gi), &y) in ga.iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    *o += gi * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = self.slot(grads, a).as_mut_slice();
                for ((o, &gi), &y) in ga.iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    *o += gi * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let x = self.value(a).clone();
                let ga = self.slot(grads, a).as_mut_slice();
                for ((o, &gi), &xi) in ga.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(a).clone();
                let ga = self.slot(grads, a).as_mut_slice();
                for ((o, &gi), &xi) in ga.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                    if xi > LOG_FLOOR {
                        *o += gi / xi;
                    }
                }
            }
            Op::SignedSqrt(a) => {
                let x = self.value(a).clone();
                let ga = self.slot(grads, a).as_mut_slice();
                for ((o, &gi), &xi) in ga.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                    *o += gi * 0.5 / (xi.abs() + SIGNED_SQRT_EPS).sqrt();
                }
            }
            Op::L2Normalize(a) => {
                let norm = self.value(a).norm_sq().sqrt();
                if norm > 0.0 {
                    let yg = dot(out.as_slice(), g.as_slice());
                    let ga = self.slot(grads, a).as_mut_slice();
                    for ((o, &gi), &y) in ga.iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                        *o += (gi - y * yg) / norm;
                    }
                }
            }
            Op::Softmax(a) => {
                let ga = self.slot(grads, a).as_mut_slice();
                softmax_backward(out.as_slice(), g.as_slice(), ga);
            }
            Op::SoftmaxRows(a) => {
                let ga = self.slot(grads, a);
                for r in 0..out.rows() {
                    softmax_backward(out.row(r), g.row(r), ga.row_mut(r));
                }
            }
            Op::VStack(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gp = self.slot(grads, p).as_mut_slice();
                    for (o, x) in gp.iter_mut().zip(&g.as_slice()[offset..offset + n]) {
                        *o += x;
                    }
                    offset += n;
                }
            }
            Op::HStack(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    let gp = self.slot(grads, p);
                    for r in 0..g.rows() {
                        for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                            *o += x;
                        }
                    }
                    offset += cols;
                }
            }
            Op::StackRows(ref vectors) => {
                for (r, &v) in vectors.iter().enumerate() {
                    let gv = self.slot(grads, v).as_mut_slice();
                    for (o, x) in gv.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Slice(a, start, len) => {
                let ga = self.slot(grads, a).as_mut_slice();
                for (o, x) in ga[start..start + len].iter_mut().zip(g.as_slice()) {
                    *o += x;
                }
            }
            Op::Row(a, r) => {
                let ga = self.slot(grads, a);
                for (o, x) in ga.row_mut(r).iter_mut().zip(g.as_slice()) {
                    *o += x;
                }
            }
            Op::Col(a, c) => {
                let ga = self.slot(grads, a);
                for (r, x) in g.as_slice().iter().enumerate() {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + x);
                }
            }
            Op::MeanRows(a) => {
                let m = self.shape(a).0 as f64;
                let ga = self.slot(grads, a);
                for r in 0..ga.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o += x / m;
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.slot(grads, a).add_assign(&gt);
            }
            Op::SumPool(a, k) => {
                let ga = self.slot(grads, a).as_mut_slice();
                for (j, x) in g.as_slice().iter().enumerate() {
                    for o in &mut ga[j * k..(j + 1) * k] {
                        *o += x;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.as_slice()[0];
                for o in self.slot(grads, a).as_mut_slice() {
                    *o += s;
                }
            }
            Op::Pick(a, i) => {
                self.slot(grads, a).as_mut_slice()[i] += g.as_slice()[0];
            }
        }
    }
}
