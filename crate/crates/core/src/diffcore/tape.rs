use std::borrow::Cow;

use crate::real::Real;

use super::tensor::{pairwise_sum, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient storage. Table lookups produce row-sparse contributions so large
/// embedding tables never need a dense buffer per step.
#[derive(Clone, Debug)]
pub enum Grad<T> {
    Dense(Vec<T>),
    Rows { width: usize, rows: Vec<u32>, values: Vec<T> },
}

impl<T: Real> Grad<T> {
    /// Dense view of the gradient for a tensor of `len` entries.
    pub fn to_dense(&self, len: usize) -> Vec<T> {
        match self {
            Grad::Dense(v) => v.clone(),
            Grad::Rows { width, rows, values } => {
                let mut out = vec![T::zero(); len];
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut out[r as usize * width..(r as usize + 1) * width];
                    for (d, &s) in dst.iter_mut().zip(&values[k * width..(k + 1) * width]) {
                        *d += s;
                    }
                }
                out
            }
        }
    }

    fn add_dense(slot: &mut Option<Grad<T>>, len: usize, contrib: &[T]) {
        match slot {
            None => *slot = Some(Grad::Dense(contrib.to_vec())),
            Some(Grad::Dense(v)) => {
                for (a, &b) in v.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            Some(g @ Grad::Rows { .. }) => {
                let mut v = g.to_dense(len);
                for (a, &b) in v.iter_mut().zip(contrib) {
                    *a += b;
                }
                *slot = Some(Grad::Dense(v));
            }
        }
    }

    fn add_rows(slot: &mut Option<Grad<T>>, width: usize, rows: Vec<u32>, values: Vec<T>) {
        match slot {
            None => *slot = Some(Grad::Rows { width, rows, values }),
            Some(Grad::Rows { width: w, rows: r, values: v }) if *w == width => {
                r.extend(rows);
                v.extend(values);
            }
            Some(Grad::Rows { .. }) => unreachable!("row width is fixed per tensor"),
            Some(Grad::Dense(d)) => {
                for (k, &row) in rows.iter().enumerate() {
                    let dst = &mut d[row as usize * width..(row as usize + 1) * width];
                    for (a, &b) in dst.iter_mut().zip(&values[k * width..(k + 1) * width]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Backward sink handed to custom primitives; one slot per input.
pub struct InputGrads<T> {
    needs: Vec<bool>,
    lens: Vec<usize>,
    slots: Vec<Option<Grad<T>>>,
}

impl<T: Real> InputGrads<T> {
    pub fn needs(&self, input: usize) -> bool {
        self.needs[input]
    }

    /// Mutable dense gradient buffer for `input`, or `None` when the input
    /// does not require a gradient.
    pub fn dense(&mut self, input: usize) -> Option<&mut [T]> {
        if !self.needs[input] {
            return None;
        }
        let len = self.lens[input];
        let slot = &mut self.slots[input];
        match slot {
            Some(Grad::Dense(_)) => {}
            None => *slot = Some(Grad::Dense(vec![T::zero(); len])),
            Some(g @ Grad::Rows { .. }) => *slot = Some(Grad::Dense(g.to_dense(len))),
        }
        match slot {
            Some(Grad::Dense(v)) => Some(v.as_mut_slice()),
            _ => unreachable!(),
        }
    }

    /// Append row-sparse contributions (`rows.len() * width == values.len()`).
    pub fn add_rows(&mut self, input: usize, width: usize, rows: Vec<u32>, values: Vec<T>) {
        if self.needs[input] {
            debug_assert_eq!(rows.len() * width, values.len());
            Grad::add_rows(&mut self.slots[input], width, rows, values);
        }
    }
}

/// A fused primitive with a hand-written vector-Jacobian product.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, out_grad: &[T], grads: &mut InputGrads<T>);
}

enum Op<'a, T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Pow(Var, T),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<u32>),
    Lerp(Var, Var, Var),
    StopGradient,
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomOp<T> + 'a>),
}

struct Node<'a, T: Real> {
    op: Op<'a, T>,
    value: Cow<'a, Tensor<T>>,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so recording order is a topological order and backward walks it in
/// reverse.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape { op, shapes: vec![a.to_vec(), b.to_vec()] }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<'a, T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Cow::Owned(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Owned leaf; gradient tracked iff `tensor.requires_grad`.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(Op::Leaf, tensor, rg)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor, false)
    }

    /// Borrowed trainable leaf; the parameter is not copied.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Borrowed(tensor), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf without gradient tracking.
    pub fn frozen(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Borrowed(tensor), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<'a, T>,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, out, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<'a, T>) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(a);
        self.push(op, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("divide", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[r, c] + bias[c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.len() != cols {
            return Err(shape_err("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRow(x, bias), out, ng))
    }

    /// `x[r, c] * s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        let (vx, vs) = (self.value(x), self.value(s));
        let rows = vx.rows();
        if vs.len() != rows {
            return Err(shape_err("mul_col", vx.shape(), vs.shape()));
        }
        let cols = vx.cols();
        let sd = vs.data();
        let data = vx
            .data()
            .chunks_exact(cols)
            .zip(sd)
            .flat_map(|(row, &k)| row.iter().map(move |&p| p * k))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Op::MulCol(x, s), out, ng))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: T) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), k as isize, 1, vb.data(), n as isize, 1, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn pow(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a).data());
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = pairwise_sum(va.data()) / T::lit(va.len() as f64);
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s), ng)
    }

    /// Row gather from a `[rows, width]` table. Repeated rows accumulate their
    /// gradients on backward.
    pub fn gather(&mut self, table: Var, rows: &[u32]) -> Result<Var, DiffError> {
        let vt = self.value(table);
        let (n, w) = (vt.rows(), vt.cols());
        if rows.is_empty() {
            return Err(DiffError::InvalidShape(vec![0, w]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= n) {
            return Err(DiffError::Index { op: "gather", index: bad as usize, len: n });
        }
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&vt.data()[r as usize * w..(r as usize + 1) * w]);
        }
        let out = Tensor::new(vec![rows.len(), w], data)?;
        let ng = self.needs(table);
        Ok(self.push(Op::Gather(table, rows.to_vec()), out, ng))
    }

    /// `a + w·(b − a)`, elementwise.
    pub fn lerp(&mut self, a: Var, b: Var, w: Var) -> Result<Var, DiffError> {
        let (va, vb, vw) = (self.value(a), self.value(b), self.value(w));
        if va.shape() != vb.shape() || va.shape() != vw.shape() {
            return Err(DiffError::Shape {
                op: "lerp",
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec(), vw.shape().to_vec()],
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .zip(vw.data())
            .map(|((&x, &y), &t)| x + t * (y - x))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b) || self.needs(w);
        Ok(self.push(Op::Lerp(a, b, w), out, ng))
    }

    /// Passes the value forward, blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Op::StopGradient, v, false)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if len == 0 || start + len > cols {
            return Err(DiffError::Index { op: "slice_cols", index: start + len, len: cols });
        }
        let mut data = Vec::with_capacity(rows * len);
        for row in va.data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start), out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, ng))
    }

    /// Record a fused primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T> + 'a>) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(Op::Custom(inputs.to_vec(), op), output, ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, DiffError> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(DiffError::NonScalarOutput(v.shape().to_vec()));
        }
        self.backward_with_seed(output, &Tensor::scalar(T::one()))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>, DiffError> {
        let out_shape = self.value(output).shape();
        if seed.len() != self.value(output).len() {
            return Err(shape_err("backward seed", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Grad<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Grad::Dense(seed.data().to_vec()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let g = g.to_dense(node.value.len());
            self.backprop_node(node, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Grad<T>>]) {
        let mut pending_rows: Vec<(Var, usize, Vec<u32>, Vec<T>)> = Vec::new();
        let mut emit = |v: Var, contrib: &[T]| {
            if self.nodes[v.0].needs_grad {
                Grad::add_dense(&mut grads[v.0], self.nodes[v.0].value.len(), contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                emit(*a, g);
                emit(*b, g);
            }
            Op::Sub(a, b) => {
                emit(*a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                emit(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    emit(*a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    emit(*b, &d);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x / y).collect();
                    emit(*a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> =
                        g.iter().zip(va).zip(vb).map(|((&x, &p), &q)| -x * p / (q * q)).collect();
                    emit(*b, &d);
                }
            }
            Op::AddRow(x, b) => {
                emit(*x, g);
                if self.needs(*b) {
                    let cols = self.value(*b).len();
                    let mut d = vec![T::zero(); cols];
                    for row in g.chunks_exact(cols) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    emit(*b, &d);
                }
            }
            Op::MulCol(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let cols = vx.cols();
                if self.needs(*x) {
                    let d: Vec<T> = g
                        .chunks_exact(cols)
                        .zip(vs.data())
                        .flat_map(|(row, &k)| row.iter().map(move |&p| p * k))
                        .collect();
                    emit(*x, &d);
                }
                if self.needs(*s) {
                    let d: Vec<T> = g
                        .chunks_exact(cols)
                        .zip(vx.data().chunks_exact(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                        .collect();
                    emit(*s, &d);
                }
            }
            Op::Scale(a, k) => {
                let d: Vec<T> = g.iter().map(|&x| x * *k).collect();
                emit(*a, &d);
            }
            Op::Offset(a) => emit(*a, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, &mut d, false);
                    emit(*a, &d);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, &mut d, false);
                    emit(*b, &d);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let d: Vec<T> =
                    g.iter().zip(va).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect();
                emit(*a, &d);
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let d: Vec<T> = g.iter().zip(out).map(|(&x, &s)| x * s * (T::one() - s)).collect();
                emit(*a, &d);
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                let d: Vec<T> = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &y)| {
                        if y > T::zero() {
                            x
                        } else if y < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                emit(*a, &d);
            }
            Op::Pow(a, p) => {
                let va = self.value(*a).data();
                let pm1 = *p - T::one();
                let d: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * *p * y.powf(pm1)).collect();
                emit(*a, &d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                emit(*a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                emit(*a, &vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Gather(table, rows) => {
                if self.needs(*table) {
                    let w = self.value(*table).cols();
                    Grad::add_rows(&mut grads[table.0], w, rows.clone(), g.to_vec());
                }
            }
            Op::Lerp(a, b, w) => {
                let (va, vb, vw) = (self.value(*a).data(), self.value(*b).data(), self.value(*w).data());
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().zip(vw).map(|(&x, &t)| x * (T::one() - t)).collect();
                    emit(*a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g.iter().zip(vw).map(|(&x, &t)| x * t).collect();
                    emit(*b, &d);
                }
                if self.needs(*w) {
                    let d: Vec<T> = g.iter().zip(va.iter().zip(vb)).map(|(&x, (&p, &q))| x * (q - p)).collect();
                    emit(*w, &d);
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (rows, cols) = (va.rows(), va.cols());
                let len = node.value.cols();
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                emit(*a, &d);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        emit(p, &d);
                    }
                    offset += c;
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut sink = InputGrads {
                    needs: inputs.iter().map(|&v| self.needs(v)).collect(),
                    lens: values.iter().map(|t| t.len()).collect(),
                    slots: inputs.iter().map(|_| None).collect(),
                };
                op.backward(&values, &node.value, g, &mut sink);
                for (k, slot) in sink.slots.into_iter().enumerate() {
                    let v = inputs[k];
                    match slot {
                        None => {}
                        Some(Grad::Dense(d)) => emit(v, &d),
                        Some(Grad::Rows { width, rows, values }) => pending_rows.push((v, width, rows, values)),
                    }
                }
            }
        }
        for (v, width, rows, values) in pending_rows {
            Grad::add_rows(&mut grads[v.0], width, rows, values);
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Grad<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Grad<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Grad<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Dense gradient for `v` given the tensor length; zeros if untouched.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_dense(len),
            None => vec![T::zero(); len],
        }
    }
}
