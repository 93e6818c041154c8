//! Reverse-mode differentiation over dense, row-major `f64` arrays.
//!
//! A [`Tape`] is built eagerly: every builder call computes its value and
//! records the operation. Gradients are obtained by sweeping the tape in
//! reverse. Rank-1 tensors act as row vectors when broadcast against a
//! matrix and as column vectors on the right of a matrix product.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension { expected: numel, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => *self.shape.last().unwrap(),
        }
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Sin,
    Cos,
    Square,
    Sqrt,
    Recip,
    /// Heaviside step, 1 for x >= 0; zero derivative.
    Step,
    Clamp(f64, f64),
    /// x ↦ a·x + b.
    Affine(f64, f64),
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Step => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Affine(a, b) => a * x + b,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Step => 0.0,
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Affine(a, _) => a,
        }
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

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Record of primitive operations in topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Replaceable leaf; inputs are numbered in creation order for [`Tape::replay`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Input, value);
        self.inputs.push(v);
        v
    }

    /// Leaf that keeps its value on replay.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(a, factor))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        self.record(Op::Unary(a, f))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Dot(a, b))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    /// Half-open range `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::Slice(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        for v in op_inputs(&op) {
            if v.0 >= id {
                return Err(Error::UnknownNode(v.0));
            }
        }
        let value = eval_op(&op, &self.nodes, id)?;
        Ok(self.push(op, value))
    }

    /// Re-runs the recorded operations with new values for the input leaves.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Tape> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Dimension { expected: self.inputs.len(), got: inputs.len() });
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input => {
                    let t = &inputs[next_input];
                    next_input += 1;
                    if t.shape != node.value.shape {
                        return Err(Error::Shape {
                            node: id,
                            detail: format!(
                                "input declared as {:?}, got {:?}",
                                node.value.shape, t.shape
                            ),
                        });
                    }
                    t.clone()
                }
                Op::Constant => node.value.clone(),
                op => eval_op(op, &nodes, id)?,
            };
            nodes.push(Node { op: node.op.clone(), value });
        }
        Ok(Tape { nodes, inputs: self.inputs.clone() })
    }

    /// Value of `output` for new input values.
    pub fn forward(&self, inputs: &[Tensor], output: Var) -> Result<Tensor> {
        self.check(output)?;
        Ok(self.replay(inputs)?.nodes[output.0].value.clone())
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`,
    /// evaluated at the recorded values.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput { node: output.0, shape: out.shape.clone() });
        }

        let last = output.0;
        let mut needs = vec![false; last + 1];
        for &w in wrt {
            if w.0 <= last {
                needs[w.0] = true;
            }
        }
        for id in 0..=last {
            if !needs[id] && op_inputs(&self.nodes[id].op).iter().any(|v| needs[v.0]) {
                needs[id] = true;
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; last + 1];
        grads[last] = Some(vec![1.0]);
        let mut saved: Vec<Option<Vec<f64>>> = vec![None; last + 1];
        for &w in wrt {
            if w.0 <= last {
                saved[w.0] = Some(Vec::new());
            }
        }

        for id in (0..=last).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            if saved[id].is_some() {
                saved[id] = Some(g.clone());
            }
            self.backprop(id, &g, &needs, &mut grads);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.nodes[w.0].value.shape.clone();
                match saved.get(w.0).cloned().flatten() {
                    Some(data) if !data.is_empty() || shape.iter().product::<usize>() == 0 => {
                        Tensor { shape, data }
                    }
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    /// Replays with `inputs` and differentiates `output`.
    pub fn gradient_at(&self, inputs: &[Tensor], output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.replay(inputs)?.gradient(output, wrt)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    fn backprop(&self, id: usize, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = matmul_dims(&av.shape, &bv.shape).expect("checked at record time");
                if needs[a.0] {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &bv.data, true, &mut da);
                    accumulate(grads, a.0, da);
                }
                if needs[b.0] {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &av.data, true, g, false, &mut db);
                    accumulate(grads, b.0, db);
                }
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    accumulate(grads, a.0, g.to_vec());
                }
                if needs[b.0] {
                    let blen = self.nodes[b.0].value.len();
                    if blen == g.len() {
                        accumulate(grads, b.0, g.to_vec());
                    } else {
                        let mut db = vec![0.0; blen];
                        for row in g.chunks(blen) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(grads, b.0, db);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                if needs[a.0] {
                    accumulate(grads, a.0, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if needs[b.0] {
                    accumulate(grads, b.0, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, s) => {
                if needs[a.0] {
                    accumulate(grads, a.0, g.iter().map(|g| g * s).collect());
                }
            }
            Op::Unary(a, f) => {
                if needs[a.0] {
                    let x = &self.nodes[a.0].value.data;
                    let y = &node.value.data;
                    let da = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * f.derivative(x, y))
                        .collect();
                    accumulate(grads, a.0, da);
                }
            }
            Op::Sum(a) => {
                if needs[a.0] {
                    accumulate(grads, a.0, vec![g[0]; self.nodes[a.0].value.len()]);
                }
            }
            Op::Dot(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                if needs[a.0] {
                    accumulate(grads, a.0, bv.iter().map(|b| g[0] * b).collect());
                }
                if needs[b.0] {
                    accumulate(grads, b.0, av.iter().map(|a| g[0] * a).collect());
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    if needs[p.0] {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                        }
                        accumulate(grads, p.0, dp);
                    }
                    offset += pc;
                }
            }
            Op::Slice(a, start, end) => {
                if needs[a.0] {
                    let src = &self.nodes[a.0].value;
                    let cols = src.cols();
                    let width = end - start;
                    let mut da = vec![0.0; src.len()];
                    for r in 0..src.rows() {
                        da[r * cols + start..r * cols + end]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    accumulate(grads, a.0, da);
                }
            }
            Op::Reshape(a, _) => {
                if needs[a.0] {
                    accumulate(grads, a.0, g.to_vec());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Unary(a, _) | Op::Sum(a) | Op::Slice(a, _, _) | Op::Reshape(a, _) => {
            vec![*a]
        }
        Op::Concat(parts) => parts.clone(),
    }
}

/// (m, k, n) for a product of the given shapes.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize)> {
    let (m, k) = match a.len() {
        1 => (1, a[0]),
        2 => (a[0], a[1]),
        _ => return None,
    };
    let (k2, n) = match b.len() {
        1 => (b[0], 1),
        2 => (b[0], b[1]),
        _ => return None,
    };
    (k == k2).then_some((m, k, n))
}

fn shape_err(node: usize, detail: String) -> Error {
    Error::Shape { node, detail }
}

fn eval_op(op: &Op, nodes: &[Node], id: usize) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Input | Op::Constant => unreachable!("leaves carry their own values"),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = matmul_dims(&av.shape, &bv.shape).ok_or_else(|| {
                shape_err(id, format!("cannot multiply {:?} by {:?}", av.shape, bv.shape))
            })?;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &av.data, false, &bv.data, false, &mut out);
            let shape = match (av.shape.len(), bv.shape.len()) {
                (2, 2) => vec![m, n],
                (2, 1) => vec![m],
                _ => vec![n],
            };
            Ok(Tensor { shape, data: out })
        }
        Op::Add(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.shape == bv.shape {
                let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
                return Ok(Tensor { shape: av.shape.clone(), data });
            }
            let row_like = av.shape.len() == 2
                && bv.len() == av.shape[1]
                && (bv.shape.len() == 1 || (bv.shape.len() == 2 && bv.shape[0] == 1));
            if !row_like {
                return Err(shape_err(
                    id,
                    format!("cannot add {:?} and {:?}", av.shape, bv.shape),
                ));
            }
            let mut data = av.data.clone();
            for row in data.chunks_mut(bv.len()) {
                for (x, y) in row.iter_mut().zip(&bv.data) {
                    *x += y;
                }
            }
            Ok(Tensor { shape: av.shape.clone(), data })
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.shape != bv.shape {
                return Err(shape_err(
                    id,
                    format!("elementwise product of {:?} and {:?}", av.shape, bv.shape),
                ));
            }
            let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
            Ok(Tensor { shape: av.shape.clone(), data })
        }
        Op::Scale(a, s) => {
            let av = val(a);
            Ok(Tensor { shape: av.shape.clone(), data: av.data.iter().map(|x| x * s).collect() })
        }
        Op::Unary(a, f) => {
            let av = val(a);
            Ok(Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| f.apply(x)).collect(),
            })
        }
        Op::Sum(a) => Ok(Tensor::scalar(val(a).data.iter().sum())),
        Op::Dot(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.len() != bv.len() {
                return Err(shape_err(
                    id,
                    format!("dot of {:?} and {:?}", av.shape, bv.shape),
                ));
            }
            Ok(Tensor::scalar(av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum()))
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return Err(shape_err(id, "empty concatenation".into()));
            }
            let first = val(&parts[0]);
            let rank = first.shape.len();
            if rank == 0 || rank > 2 {
                return Err(shape_err(id, format!("cannot concatenate rank {rank}")));
            }
            let rows = first.rows();
            let mut total = 0;
            for p in parts {
                let pv = val(p);
                if pv.shape.len() != rank || pv.rows() != rows {
                    return Err(shape_err(
                        id,
                        format!("concatenating {:?} with {:?}", first.shape, pv.shape),
                    ));
                }
                total += pv.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(p).row(r));
                }
            }
            let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
            Ok(Tensor { shape, data })
        }
        Op::Slice(a, start, end) => {
            let av = val(a);
            let rank = av.shape.len();
            if rank == 0 || rank > 2 || start > end || *end > av.cols() {
                return Err(shape_err(
                    id,
                    format!("slice {start}..{end} of {:?}", av.shape),
                ));
            }
            let mut data = Vec::with_capacity(av.rows() * (end - start));
            for r in 0..av.rows() {
                data.extend_from_slice(&av.row(r)[*start..*end]);
            }
            let shape = if rank == 1 { vec![end - start] } else { vec![av.rows(), end - start] };
            Ok(Tensor { shape, data })
        }
        Op::Reshape(a, shape) => {
            let av = val(a);
            if shape.iter().product::<usize>() != av.len() {
                return Err(shape_err(id, format!("reshape {:?} to {:?}", av.shape, shape)));
            }
            Ok(Tensor { shape: shape.clone(), data: av.data.clone() })
        }
    }
}

/// `c = op(a) · op(b)` for row-major operands; `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / (den + 1e-12)
    }

    /// Central differences of a scalar function of a flat vector.
    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let fp = f(&x);
                x[i] = orig - h;
                let fm = f(&x);
                x[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn two_layer(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Var {
        let h = tape.matmul(w1, x).unwrap();
        let h = tape.unary(h, Unary::LeakyRelu(0.01)).unwrap();
        let y = tape.matmul(w2, h).unwrap();
        tape.sum(y).unwrap()
    }

    #[test]
    fn identity_tape_replays_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0; 3]));
        let out = tape.forward(&[Tensor::vector(vec![1.0, 2.0, 3.0])], x).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.value(s).item(), Some(25.0));
        let g = tape.gradient(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0, 8.0]);
    }

    #[test]
    fn zero_weight_network_outputs_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.3, -1.2, 5.0]));
        let w1 = tape.input(Tensor::zeros(&[4, 3]));
        let w2 = tape.input(Tensor::zeros(&[2, 4]));
        let h = tape.matmul(w1, x).unwrap();
        let h = tape.unary(h, Unary::LeakyRelu(0.01)).unwrap();
        let y = tape.matmul(w2, h).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let x = tape.input(Tensor::vector(vec![0.7, 11.0]));
        let f = tape.dot(a, x).unwrap();
        assert_eq!(tape.gradient(f, &[x]).unwrap()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn random_two_layer_mlp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1 = Tensor::matrix(7, 5, (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Tensor::matrix(3, 7, (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(x0.clone()));
        let w1v = tape.constant(w1);
        let w2v = tape.constant(w2);
        let out = two_layer(&mut tape, x, w1v, w2v);
        let g = tape.gradient(out, &[x]).unwrap();

        let f = |p: &[f64]| tape.forward(&[Tensor::vector(p.to_vec())], out).unwrap().data()[0];
        let fd = central_diff(f, &x0, 1e-5);
        assert!(rel_err(g[0].data(), &fd) < 1e-6, "{:?} vs {:?}", g[0], fd);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.gradient(y, &[x]), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.gradient(s, &[Var(99)]), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn replay_shape_mismatch_names_node() {
        let mut tape = Tape::new();
        let _c = tape.constant(Tensor::scalar(1.0));
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.forward(&[Tensor::vector(vec![1.0])], x).unwrap_err();
        assert!(matches!(err, Error::Shape { node: 1, .. }), "{err}");
    }

    #[test]
    fn recording_shape_mismatch_names_node() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { node: 2, .. })));
    }

    #[test]
    fn broadcast_add_sums_bias_gradient_over_rows() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let b = tape.input(Tensor::vector(vec![0.5, -0.5]));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.gradient(s, &[b]).unwrap();
        assert_eq!(g[0].data(), &[3.0, 3.0]);
    }

    #[test]
    fn unrequested_branch_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0]));
        let z = tape.input(Tensor::vector(vec![2.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.gradient(s, &[z]).unwrap()[0].data(), &[0.0]);
    }

    /// Builds a random composition of every primitive on a [2, 3] input.
    fn random_tape(seed: u64) -> (Tape, Var, Var, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect::<Vec<f64>>();
        let x0 = r(6);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, x0.clone()).unwrap());
        let w = tape.constant(Tensor::matrix(3, 4, r(12)).unwrap());
        let b = tape.constant(Tensor::vector(r(4)));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add(h, b).unwrap();
        let a = tape.unary(h, Unary::Tanh).unwrap();
        let s = tape.unary(h, Unary::Sigmoid).unwrap();
        let e = tape.unary(h, Unary::Exp).unwrap();
        let sn = tape.unary(h, Unary::Sin).unwrap();
        let cs = tape.unary(h, Unary::Cos).unwrap();
        let lr = tape.unary(h, Unary::LeakyRelu(0.2)).unwrap();
        let lr = tape.unary(lr, Unary::Affine(1.3, -0.2)).unwrap();
        let prod = tape.mul(a, s).unwrap();
        let cat = tape.concat(&[prod, e, sn, cs, lr]).unwrap();
        let sl = tape.slice(cat, 2, 15).unwrap();
        let sq = tape.unary(sl, Unary::Square).unwrap();
        let pos = tape.unary(sq, Unary::Exp).unwrap();
        let rt = tape.unary(pos, Unary::Sqrt).unwrap();
        let rc = tape.unary(rt, Unary::Recip).unwrap();
        let flat = tape.reshape(rc, &[26]).unwrap();
        let c = tape.constant(Tensor::vector(r(26)));
        let d = tape.dot(flat, c).unwrap();
        let sc = tape.scale(d, 1.7).unwrap();
        let tot = tape.sum(sq).unwrap();
        let out = tape.add(sc, tot).unwrap();
        (tape, x, out, x0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn composed_tapes_match_central_differences(seed in 0u64..10_000) {
            let (tape, x, out, x0) = random_tape(seed);
            let g = tape.gradient(out, &[x]).unwrap();
            let f = |p: &[f64]| {
                tape.forward(&[Tensor::matrix(2, 3, p.to_vec()).unwrap()], out).unwrap().data()[0]
            };
            let fd = central_diff(f, &x0, 1e-5);
            prop_assert!(rel_err(g[0].data(), &fd) < 1e-5);
        }

        #[test]
        fn gradient_is_linear_in_the_output(seed in 0u64..10_000) {
            let (mut tape, x, out, _) = random_tape(seed);
            let g1 = tape.gradient(out, &[x]).unwrap();
            // second function of the same input: scaled sum of squares
            let sq = tape.mul(x, x).unwrap();
            let s2 = tape.sum(sq).unwrap();
            let s2 = tape.scale(s2, 0.3).unwrap();
            let total = tape.add(out, s2).unwrap();
            let g2 = tape.gradient(s2, &[x]).unwrap();
            let gt = tape.gradient(total, &[x]).unwrap();
            for i in 0..6 {
                prop_assert!((gt[0].data()[i] - g1[0].data()[i] - g2[0].data()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn replay_is_bitwise_deterministic(seed in 0u64..10_000) {
            let (tape, x, out, x0) = random_tape(seed);
            let inputs = [Tensor::matrix(2, 3, x0).unwrap()];
            let a = tape.replay(&inputs).unwrap();
            let b = tape.replay(&inputs).unwrap();
            prop_assert_eq!(a.value(out).data()[0].to_bits(), tape.value(out).data()[0].to_bits());
            prop_assert_eq!(a.value(out).data()[0].to_bits(), b.value(out).data()[0].to_bits());
            let ga = a.gradient(out, &[x]).unwrap();
            let gb = b.gradient(out, &[x]).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&ga[0]), bits(&gb[0]));
        }
    }
}
