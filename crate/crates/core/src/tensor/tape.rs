use std::sync::Arc;

use super::{GatherTable, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    Transpose(Var),
    Reshape(Var),
    CumsumExclusive(Var, usize),
    StepQuantize(Var, Var),
    Gather(Var, Arc<GatherTable>),
    MaskedVariance {
        input: Var,
        mask: Arc<Vec<bool>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Surrogate derivative of the unit step: `2 - 4|u|` near zero, a flat
/// 0.4 tail out to `|u| = 1`, zero beyond.
pub fn long_tail_slope(u: f64) -> f64 {
    let a = u.abs();
    // The two pieces meet at 0.4; the flat one is exact there.
    if a < 0.4 {
        2.0 - 4.0 * a
    } else if a <= 1.0 {
        0.4
    } else {
        0.0
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// (outer, len, inner) extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

// dA += dC * B^T
fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + p] += acc;
        }
    }
}

// dB += A^T * dC
fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Detached leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            matmul_into(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), rg))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_suffix(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        let mut value = Vec::with_capacity(va.len());
        for chunk in va.chunks_exact(nb.max(1)) {
            value.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is repeated
    /// over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product with leading-axis expansion of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, s)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.grad_of(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.grad_of(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += v[base + j];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.grad_of(&[a]);
        Ok(self.push(oshape, out, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::Domain { op: "log" });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::Domain { op: "sqrt" });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| v[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (v[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(shape, out, Op::Softmax(a, axis), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.grad_of(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[axis] {
            return Err(Error::IndexOutOfRange {
                what: "slice end",
                index: end,
                len: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let w = end - start;
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let rg = self.grad_of(&[a]);
        Ok(self.push(oshape, out, Op::Slice { input: a, axis, start }, rg))
    }

    /// Repeats `a` over new leading axes `lead`.
    pub fn broadcast(&mut self, a: Var, lead: &[usize]) -> Var {
        let reps: usize = lead.iter().product();
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(v);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(a));
        let rg = self.grad_of(&[a]);
        self.push(shape, out, Op::Broadcast(a), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: shape.len(),
            });
        }
        let out = transpose_last2(self.value(a), &shape);
        let mut oshape = shape;
        let r = oshape.len();
        oshape.swap(r - 1, r - 2);
        let rg = self.grad_of(&[a]);
        Ok(self.push(oshape, out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.grad_of(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `y_i = sum_{j<i} x_j` along `axis`.
    pub fn cumsum_exclusive(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("cumsum_exclusive", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = 0.0;
                for i in 0..n {
                    let idx = (o * n + i) * inner + j;
                    out[idx] = acc;
                    acc += v[idx];
                }
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(shape, out, Op::CumsumExclusive(a, axis), rg))
    }

    /// Binary step `S(x - threshold)` with `S(0) = 1`; the backward pass
    /// uses [`long_tail_slope`] in place of the step's derivative.
    pub fn step_quantize(&mut self, x: Var, threshold: Var) -> Result<Var> {
        if self.shape(x) != self.shape(threshold) {
            return Err(Error::ShapeMismatch {
                op: "step_quantize",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(threshold).to_vec(),
            });
        }
        let value = self
            .value(x)
            .iter()
            .zip(self.value(threshold))
            .map(|(a, t)| if a - t >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.grad_of(&[x, threshold]);
        Ok(self.push(shape, value, Op::StepQuantize(x, threshold), rg))
    }

    /// Row mixing of a rank-2 `src` by a [`GatherTable`].
    pub fn gather(&mut self, src: Var, table: Arc<GatherTable>) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || s[0] != table.src_rows() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: s.to_vec(),
                rhs: vec![table.src_rows()],
            });
        }
        let width = s[1];
        let out = table.apply(self.value(src), width);
        let rg = self.grad_of(&[src]);
        Ok(self.push(vec![table.rows(), width], out, Op::Gather(src, table), rg))
    }

    /// Population variance over the leading (view) axis of `[K, M, C]`,
    /// counting only views whose `mask[k * M + m]` is set. Cells with fewer
    /// than two valid views are zero.
    pub fn masked_variance(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                op: "masked_variance",
                lhs: s,
                rhs: vec![mask.len()],
            });
        }
        let (k, m, c) = (s[0], s[1], s[2]);
        let v = self.value(a);
        let mut out = vec![0.0; m * c];
        for cell in 0..m {
            let valid: Vec<usize> = (0..k).filter(|&i| mask[i * m + cell]).collect();
            if valid.len() < 2 {
                continue;
            }
            let n = valid.len() as f64;
            for ch in 0..c {
                let mean = valid.iter().map(|&i| v[(i * m + cell) * c + ch]).sum::<f64>() / n;
                let var = valid
                    .iter()
                    .map(|&i| {
                        let d = v[(i * m + cell) * c + ch] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                out[cell * c + ch] = var;
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(vec![m, c], out, Op::MaskedVariance { input: a, mask }, rg))
    }

    /// Reverse pass from a scalar root. Every node's gradient is returned;
    /// nodes the root does not depend on read as zero.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| matmul_grad_lhs(g, vb, d, m, k, n));
                acc(*b, &mut |d| matmul_grad_rhs(va, g, d, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for t in 0..bs {
                        matmul_grad_lhs(
                            &g[t * m * n..(t + 1) * m * n],
                            &vb[t * k * n..(t + 1) * k * n],
                            &mut d[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for t in 0..bs {
                        matmul_grad_rhs(
                            &va[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut d[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| {
                    for gc in g.chunks_exact(d.len().max(1)) {
                        d.iter_mut().zip(gc).for_each(|(d, gv)| *d += sign * gv);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = vb.len();
                acc(*a, &mut |d| {
                    for (dc, gc) in d.chunks_exact_mut(nb.max(1)).zip(g.chunks_exact(nb.max(1))) {
                        dc.iter_mut().zip(gc).zip(vb).for_each(|((d, gv), y)| *d += gv * y);
                    }
                });
                acc(*b, &mut |d| {
                    for (gc, ac) in g.chunks_exact(nb.max(1)).zip(va.chunks_exact(nb.max(1))) {
                        d.iter_mut().zip(gc).zip(ac).for_each(|((d, gv), x)| *d += gv * x);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split_axis(&nodes[a.0].shape, *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for j in 0..inner {
                                d[base + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }),
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * sigmoid(*x);
                    }
                })
            }
            Op::Square(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * x * g;
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    if *y > 0.0 {
                        *d += g / (2.0 * y);
                    }
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + j;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].shape[*axis];
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut d[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(&nodes[input.0].shape, *axis);
                let w = node.shape[*axis];
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * n + start) * inner..(o * n + start + w) * inner];
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Broadcast(a) => acc(*a, &mut |d| {
                let n = d.len();
                for (idx, gv) in g.iter().enumerate() {
                    d[idx % n] += gv;
                }
            }),
            Op::Transpose(a) => {
                let gt = transpose_last2(g, &node.shape);
                acc(*a, &mut |d| d.iter_mut().zip(&gt).for_each(|(d, g)| *d += g));
            }
            Op::CumsumExclusive(a, axis) => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut tail = 0.0;
                            for k in (0..n).rev() {
                                let idx = (o * n + k) * inner + j;
                                d[idx] += tail;
                                tail += g[idx];
                            }
                        }
                    }
                });
            }
            Op::StepQuantize(x, t) => {
                let (vx, vt) = (&nodes[x.0].value, &nodes[t.0].value);
                let slope: Vec<f64> = vx.iter().zip(vt).map(|(a, b)| long_tail_slope(a - b)).collect();
                acc(*x, &mut |d| {
                    for ((d, g), s) in d.iter_mut().zip(g).zip(&slope) {
                        *d += g * s;
                    }
                });
                acc(*t, &mut |d| {
                    for ((d, g), s) in d.iter_mut().zip(g).zip(&slope) {
                        *d -= g * s;
                    }
                });
            }
            Op::Gather(src, table) => {
                let width = nodes[src.0].shape[1];
                acc(*src, &mut |d| table.apply_transpose(g, width, d));
            }
            Op::MaskedVariance { input, mask } => {
                let s = &nodes[input.0].shape;
                let (k, m, c) = (s[0], s[1], s[2]);
                let v = &nodes[input.0].value;
                acc(*input, &mut |d| {
                    for cell in 0..m {
                        let valid: Vec<usize> = (0..k).filter(|&i| mask[i * m + cell]).collect();
                        if valid.len() < 2 {
                            continue;
                        }
                        let n = valid.len() as f64;
                        for ch in 0..c {
                            let mean =
                                valid.iter().map(|&i| v[(i * m + cell) * c + ch]).sum::<f64>() / n;
                            let gv = g[cell * c + ch];
                            for &i in &valid {
                                let idx = (i * m + cell) * c + ch;
                                d[idx] += gv * 2.0 * (v[idx] - mean) / n;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a vector of `len` entries; zero when the root does not
    /// depend on `v`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}
