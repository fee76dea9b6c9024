//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to a [`Tape`]. Node ids are assigned in
//! creation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. Nodes whose inputs are all
//! constants are marked as not needing gradients and are skipped in the
//! sweep, which keeps frozen-teacher inference cheap.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    Transpose(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Repeat { x: Var, times: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, slope: Tensor<T> },
    Exp(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    Embedding { table: Var, ids: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Row-major matrix view with explicit strides, optionally transposed.
#[derive(Clone, Copy)]
struct MatView<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> MatView<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize, transposed: bool) -> Self {
        let v = Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        };
        if transposed {
            v.t()
        } else {
            v
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, out: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        a.rows, a.cols, b.cols, a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, out,
    );
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out by `shape`) into the axis order `perm`.
///
/// Runs along the last output axis are copied as slices when that axis is
/// also the last input axis.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let (outer, run) = if perm.last() == Some(&(rank - 1)) {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; outer];
    let mut offset = 0usize;
    for _ in 0..data.len() / run {
        out.extend_from_slice(&data[offset..offset + run]);
        for ax in (0..outer).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// `tanh` through a single `exp`; cheaper than libm's `tanh` and exact to rounding.
fn fast_tanh<T: Scalar>(x: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

/// GELU (tanh approximation) and its derivative.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let x2 = x * x;
    let t = fast_tanh(c * x * (T::one() + k * x2));
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x2);
    (y, dy)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter or a point under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    /// Accepts rank-2 operands or rank-3 operands with a shared batch axis.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::dim("matmul", format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"));
        let (groups, ar, ac, br, bc) = match (sa.as_slice(), sb.as_slice()) {
            ([ar, ac], [br, bc]) => (1, *ar, *ac, *br, *bc),
            ([g, ar, ac], [h, br, bc]) if g == h => (*g, *ar, *ac, *br, *bc),
            _ => return Err(bad()),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![T::zero(); groups * m * n];
        let (va, vb) = (&self.value(a).data(), &self.value(b).data());
        for g in 0..groups {
            let av = MatView::new(&va[g * ar * ac..(g + 1) * ar * ac], ar, ac, ta);
            let bv = MatView::new(&vb[g * br * bc..(g + 1) * br * bc], br, bc, tb);
            gemm(av, bv, &mut out[g * m * n..(g + 1) * m * n], false);
        }
        let shape = if sa.len() == 3 {
            vec![groups, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, ta, tb },
            &[a, b],
        ))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &c) in row.iter_mut().zip(b) {
                *v += c;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies by a differentiable one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", format!("scale {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .transpose()
            .map_err(|_| Error::dim("transpose", format!("{:?}", self.shape(x))))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim("permute", format!("{shape:?} by {perm:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{end}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let compatible = |s: &[usize]| {
            s.len() == base.len()
                && axis < s.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b)
        };
        if let Some(bad) = parts.iter().find(|p| !compatible(self.shape(**p))) {
            return Err(Error::dim(
                "concat",
                format!("{:?} vs {base:?} on axis {axis}", self.shape(*bad)),
            ));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::dim("repeat", "zero copies"));
        }
        let v = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(times);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Repeat { x, times }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = row_softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&r| (r - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&r| r - lse));
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with elementwise affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let v = self.value(x);
        let nf = T::from_usize(n).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(v.numel() / n);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &r) in row.iter().enumerate() {
                let h = (r - mean) * rs;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (y, slope): (Vec<T>, Vec<T>) = xv.data().iter().map(|&v| gelu_parts(v)).unzip();
        let shape = xv.shape().to_vec();
        let slope = Tensor::from_parts(shape.clone(), slope);
        self.push(Tensor::from_parts(shape, y), Op::Gelu { x, slope }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let floor = T::lit(L2_NORM_FLOOR);
        let mut norms = Vec::with_capacity(v.numel() / n);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let norm = row.iter().map(|&r| r * r).sum::<T>().sqrt().max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&r| r / norm));
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel()).unwrap());
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(out, Op::SumSquares(x), &[x])
    }

    /// Row lookup: `table[ids[i]]` for every `i`, shape `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("embedding", format!("table {shape:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::dim(
                "embedding",
                format!("id {bad} out of range for {} rows", shape[0]),
            ));
        }
        if ids.is_empty() {
            return Err(Error::dim("embedding", "empty id list"));
        }
        let w = shape[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let out = Tensor::from_parts(vec![ids.len(), w], data);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if loss.0 >= n || self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node on this tape, got shape {:?}",
                self.nodes.get(loss.0).map(|nd| nd.value.shape().to_vec())
            )));
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (groups, ar, ac) = dims3(sa);
                let (_, br, bc) = dims3(sb);
                let (m, n) = (y.shape()[y.rank() - 2], y.last_dim());
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for g in 0..groups {
                        let dc = MatView::new(&dy.data()[g * m * n..(g + 1) * m * n], m, n, false);
                        let opb = MatView::new(&vb[g * br * bc..(g + 1) * br * bc], br, bc, *tb);
                        let out = &mut da[g * ar * ac..(g + 1) * ar * ac];
                        if *ta {
                            gemm(opb, dc.t(), out, false);
                        } else {
                            gemm(dc, opb.t(), out, false);
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for g in 0..groups {
                        let dc = MatView::new(&dy.data()[g * m * n..(g + 1) * m * n], m, n, false);
                        let opa = MatView::new(&va[g * ar * ac..(g + 1) * ar * ac], ar, ac, *ta);
                        let out = &mut db[g * br * bc..(g + 1) * br * bc];
                        if *tb {
                            gemm(dc.t(), opa, out, false);
                        } else {
                            gemm(opa.t(), dc, out, false);
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || dy.clone());
                self.send(grads, *b, || dy.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || dy.clone());
                self.send(grads, *b, || dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, || {
                    elementwise(dy, self.value(*b), |g, q| g * q)
                });
                self.send(grads, *b, || {
                    elementwise(dy, self.value(*a), |g, p| g * p)
                });
            }
            Op::AddBias { x, bias } => {
                self.send(grads, *x, || dy.clone());
                self.send(grads, *bias, || {
                    let n = dy.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in dy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    Tensor::from_parts(vec![n], db)
                });
            }
            Op::Scale { x, c } => self.send(grads, *x, || dy.map(|g| g * *c)),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                self.send(grads, *x, || dy.map(|g| g * c));
                self.send(grads, *s, || {
                    let d = dy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    Tensor::from_parts(self.shape(*s).to_vec(), vec![d])
                });
            }
            Op::Transpose(x) => {
                self.send(grads, *x, || dy.transpose().expect("rank-2 gradient"));
            }
            Op::Reshape(x) => self.send(grads, *x, || {
                Tensor::from_parts(self.shape(*x).to_vec(), dy.data().to_vec())
            }),
            Op::Permute { x, perm } => self.send(grads, *x, || {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(dy.data(), dy.shape(), &inverse);
                Tensor::from_parts(shape, data)
            }),
            Op::Slice { x, axis, start } => self.send(grads, *x, || {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = dy.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
                }
                Tensor::from_parts(shape.to_vec(), dx)
            }),
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let s = o * total + offset;
                            dp.extend_from_slice(&dy.data()[s..s + len]);
                        }
                        accumulate(grads, *p, Tensor::from_parts(self.shape(*p).to_vec(), dp));
                    }
                    offset += len;
                }
            }
            Op::Repeat { x, times } => self.send(grads, *x, || {
                let chunk = self.value(*x).numel();
                let mut dx = vec![T::zero(); chunk];
                for t in 0..*times {
                    for (d, &g) in dx.iter_mut().zip(&dy.data()[t * chunk..(t + 1) * chunk]) {
                        *d += g;
                    }
                }
                Tensor::from_parts(self.shape(*x).to_vec(), dx)
            }),
            Op::Softmax(x) => self.send(grads, *x, || {
                let n = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(dy.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
                }
                Tensor::from_parts(y.shape().to_vec(), dx)
            }),
            Op::LogSoftmax(x) => self.send(grads, *x, || {
                let n = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(dy.data().chunks(n)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&l, &g)| g - l.exp() * total));
                }
                Tensor::from_parts(y.shape().to_vec(), dx)
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = y.last_dim();
                let g = self.value(*gain).data();
                if self.wants(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut dx = Vec::with_capacity(y.numel());
                    for ((hr, gr), &rs) in xhat.chunks(n).zip(dy.data().chunks(n)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(g).map(|(&d, &w)| d * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / nf;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| rs * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
                }
                self.send(grads, *gain, || {
                    let mut dg = vec![T::zero(); n];
                    for (hr, gr) in xhat.chunks(n).zip(dy.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += hr[j] * gr[j];
                        }
                    }
                    Tensor::from_parts(vec![n], dg)
                });
                self.send(grads, *bias, || {
                    let mut db = vec![T::zero(); n];
                    for gr in dy.data().chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    Tensor::from_parts(vec![n], db)
                });
            }
            Op::Gelu { x, slope } => self.send(grads, *x, || {
                elementwise(dy, slope, |g, d| g * d)
            }),
            Op::Exp(x) => self.send(grads, *x, || elementwise(dy, y, |g, e| g * e)),
            Op::L2Normalize { x, norms } => self.send(grads, *x, || {
                let n = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), &norm) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &g)| (g - p * dot) / norm));
                }
                Tensor::from_parts(y.shape().to_vec(), dx)
            }),
            Op::Mean(x) => self.send(grads, *x, || {
                let v = self.value(*x);
                Tensor::full(v.shape(), dy.item() / T::from_usize(v.numel()).unwrap())
            }),
            Op::Sum(x) => self.send(grads, *x, || Tensor::full(self.shape(*x), dy.item())),
            Op::SumSquares(x) => {
                let two_g = T::lit(2.0) * dy.item();
                self.send(grads, *x, || self.value(*x).map(|v| two_g * v));
            }
            Op::Embedding { table, ids } => self.send(grads, *table, || {
                let shape = self.shape(*table);
                let w = shape[1];
                let mut dt = vec![T::zero(); shape[0] * w];
                for (row, &i) in ids.iter().enumerate() {
                    for (d, &g) in dt[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&dy.data()[row * w..(row + 1) * w])
                    {
                        *d += g;
                    }
                }
                Tensor::from_parts(shape.to_vec(), dt)
            }),
        }
    }

    fn send(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        grad: impl FnOnce() -> Tensor<T>,
    ) {
        if self.wants(v) {
            accumulate(grads, v, grad());
        }
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [g, r, c] => (*g, *r, *c),
        _ => unreachable!("matmul operands are rank 2 or 3"),
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Softmax over the last axis of a plain tensor.
pub fn row_softmax<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let n = v.last_dim();
    let mut data = Vec::with_capacity(v.numel());
    for row in v.data().chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = data.len();
        data.extend(row.iter().map(|&r| (r - max).exp()));
        let total: T = data[start..].iter().copied().sum();
        for d in &mut data[start..] {
            *d /= total;
        }
    }
    Tensor::from_parts(v.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let p = tape.leaf(Tensor::full(&[2, 2], 5.0));
        let y = tape.sum_squares(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(p), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let s = tape.softmax(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x);
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity_on_tape() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape_const(&mut tape, &[3, 2]);
        assert!(tape.add(a, c).is_err());
        assert!(tape.slice(a, 1, 2, 4).is_err());
        assert!(tape.embedding(a, &[2]).is_err());
    }

    fn tape_const(tape: &mut Tape<f32>, shape: &[usize]) -> Var {
        tape.constant(Tensor::zeros(shape))
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let p = tape.permute(x, &[1, 0]).unwrap();
        let t = tape.transpose(x).unwrap();
        assert_eq!(tape.value(p), tape.value(t));
    }

    #[test]
    fn constants_are_skipped() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let x = tape.leaf(Tensor::full(&[2], 2.0));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }
}
