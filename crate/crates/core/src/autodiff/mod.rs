//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Graph`] is a tape. Every operation evaluates eagerly and records how to
//! push gradients back to its inputs; [`Graph::backward`] walks the tape in
//! reverse creation order, so accumulation order is fixed and results are
//! bit-reproducible.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::{check_gradient, check_gradient_with, GradCheckOptions, GradCheckReport, DEFAULT_FLOOR, FD_STEP};
pub use kernels::gemm;
pub use tensor::Tensor;

use thiserror::Error;

use crate::linalg::{cholesky_in_place, cholesky_inverse, cholesky_logdet, lu_factor, lu_solve, lu_solve_transposed};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("logdet of a matrix that is not positive definite (batch {batch}, pivot {pivot})")]
    NotPositiveDefinite { batch: usize, pivot: usize },
    #[error("singular system in solve (batch {batch})")]
    Singular { batch: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Recip,
    Relu,
    Elu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Unary(Var, Unary),
    Norm(Var, usize),
    MinAxis { x: Var, arg: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    MaxPool { x: Var, arg: Vec<usize> },
    Gap(Var),
    LogDetSpd { x: Var, inv: Vec<f64> },
    Solve { a: Var, b: Var, lu: Vec<f64>, piv: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a trainable leaf. Leaves with no
    /// path to the root get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Per-output-axis strides into a tensor of `shape` broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let o = i + r - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn walk_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob, mut i) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..last {
            f(i + j, oa + j * la, ob + j * lb);
        }
        i += last;
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

/// Matmul operand layout: leading batch count for each side (`None` when the
/// operand is a shared 2-D matrix), and the (m, k, n) extents.
struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let bad = || shape_err(format!("matmul {a:?} x {b:?}"));
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return bad();
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return bad();
    }
    let (a_batched, b_batched) = (a.len() == 3, b.len() == 3);
    let batch = match (a_batched, b_batched) {
        (true, true) if a[0] == b[0] => a[0],
        (true, true) => return bad(),
        (true, false) => a[0],
        (false, true) => b[0],
        (false, false) => 1,
    };
    Ok(MatMulDims { batch, a_batched, b_batched, m, k, n })
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A tape of eagerly evaluated operations.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let out = match broadcast_shape(ta.shape(), tb.shape()) {
            Some(s) => s,
            None => return shape_err(format!("{name}: cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())),
        };
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        walk_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Ok(Tensor::from_parts(out, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect());
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` elementwise.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v + c).collect());
        let ng = self.needs(x);
        self.push(t, Op::Offset(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Recip => f64::recip,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Elu => |v| if v > 0.0 { v } else { v.exp_m1() },
            Unary::Sigmoid => |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
        };
        let tx = self.value(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect());
        let ng = self.needs(x);
        self.push(t, Op::Unary(x, kind), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    /// `max(x, 0)`; the derivative at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    // ---- structural --------------------------------------------------------

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]`, and a
    /// shared 2-D operand on either side.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (d.m, d.k, d.n);
        let mut out = vec![0.0; d.batch * m * n];
        match (d.a_batched, d.b_batched) {
            (false, false) => gemm(m, k, n, ta, false, tb, false, &mut out, false),
            (true, false) => gemm(d.batch * m, k, n, ta, false, tb, false, &mut out, false),
            _ => {
                for bi in 0..d.batch {
                    let sa = if d.a_batched { &ta[bi * m * k..(bi + 1) * m * k] } else { ta };
                    let sb = &tb[bi * k * n..(bi + 1) * k * n];
                    gemm(m, k, n, sa, false, sb, false, &mut out[bi * m * n..(bi + 1) * m * n], false);
                }
            }
        }
        let shape = if d.a_batched || d.b_batched { vec![d.batch, m, n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 {
            return shape_err(format!("transpose of rank-{r} tensor"));
        }
        let (rows, cols) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let batch = tx.numel() / (rows * cols).max(1);
        let mut out = vec![0.0; tx.numel()];
        transpose_into(tx.data(), batch, rows, cols, &mut out);
        let mut shape = tx.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} on {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return shape_err(format!("concat {base:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || start > end || end > tx.shape()[axis] {
            return shape_err(format!("slice {start}..{end} on axis {axis} of {:?}", tx.shape()));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&tx.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = w;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, ng))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean of all elements (scalar).
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return shape_err(format!("sum_axis {axis} of {:?}", tx.shape()));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &tx.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), ng))
    }

    /// Euclidean norm along `axis`, keeping it with extent 1.
    pub fn norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return shape_err(format!("norm axis {axis} of {:?}", tx.shape()));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| tx.data()[(o * n + j) * inner + i].powi(2)).sum();
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Norm(x, axis), ng))
    }

    /// Minimum along `axis` (kept with extent 1). Ties go to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || tx.shape()[axis] == 0 {
            return shape_err(format!("min_axis {axis} of {:?}", tx.shape()));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if tx.data()[idx] < tx.data()[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = tx.data()[best];
                arg[o * inner + i] = best;
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MinAxis { x, arg }, ng))
    }

    // ---- network layers ----------------------------------------------------

    /// Stride-1 convolution with zero "same" padding.
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]` with odd `K`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sb != [sw[0]] || sw[1] != sx[1] || sw[2] % 2 == 0 {
            return shape_err(format!("conv1d x{sx:?} w{sw:?} b{sb:?}"));
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let cols = kernels::im2col(self.value(x).data(), batch, cin, len, k);
        let width = batch * len;
        let mut tmp = vec![0.0; cout * width];
        gemm(cout, cin * k, width, self.value(w).data(), false, &cols, false, &mut tmp, false);
        let bias = self.value(b).data();
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for co in 0..cout {
                let src = &tmp[co * width + bi * len..co * width + (bi + 1) * len];
                let dst = &mut out[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        // Columns are only needed for the kernel gradient.
        let cols = if self.needs(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::from_parts(vec![batch, cout, len], out), Op::Conv1d { x, w, b, cols }, ng))
    }

    /// Max pooling, window 2, stride 2, ceil mode. `x: [B, C, L]`.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return shape_err(format!("maxpool1d on {:?}", tx.shape()));
        }
        let (bc, len) = (tx.shape()[0] * tx.shape()[1], tx.shape()[2]);
        let olen = len.div_ceil(2);
        let mut out = vec![0.0; bc * olen];
        let mut arg = vec![0; bc * olen];
        for r in 0..bc {
            for j in 0..olen {
                let mut best = r * len + 2 * j;
                if 2 * j + 1 < len && tx.data()[best + 1] > tx.data()[best] {
                    best += 1;
                }
                out[r * olen + j] = tx.data()[best];
                arg[r * olen + j] = best;
            }
        }
        let shape = vec![tx.shape()[0], tx.shape()[1], olen];
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, arg }, ng))
    }

    /// Global average pooling `[B, C, L] -> [B, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || tx.shape()[2] == 0 {
            return shape_err(format!("gap on {:?}", tx.shape()));
        }
        let len = tx.shape()[2];
        let out = tx.data().chunks(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
        let shape = vec![tx.shape()[0], tx.shape()[1]];
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gap(x), ng))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `ln det` of symmetric positive definite matrices `[..., n, n] -> [...]`.
    /// The input is symmetrized as `(A + Aᵀ)/2` first.
    pub fn logdet_spd(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 || tx.shape()[r - 1] != tx.shape()[r - 2] {
            return shape_err(format!("logdet_spd on {:?}", tx.shape()));
        }
        let n = tx.shape()[r - 1];
        let batch = tx.numel() / (n * n).max(1);
        let mut out = vec![0.0; batch];
        let mut inv = vec![0.0; tx.numel()];
        let mut l = vec![0.0; n * n];
        for bi in 0..batch {
            let a = &tx.data()[bi * n * n..(bi + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    l[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
                }
            }
            cholesky_in_place(&mut l, n).map_err(|e| match e {
                crate::linalg::LinalgError::NotPositiveDefinite { pivot } => {
                    AutodiffError::NotPositiveDefinite { batch: bi, pivot }
                }
                other => AutodiffError::Shape(other.to_string()),
            })?;
            out[bi] = cholesky_logdet(&l, n);
            cholesky_inverse(&l, n, &mut inv[bi * n * n..(bi + 1) * n * n]);
        }
        let shape = tx.shape()[..r - 2].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogDetSpd { x, inv }, ng))
    }

    /// Solves `A X = B` for `A: [..., n, n]`, `B: [..., n, m]` with equal
    /// leading extents.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[r - 1] != sa[r - 2] || sb[r - 2] != sa[r - 1] || sa[..r - 2] != sb[..r - 2] {
            return shape_err(format!("solve {sa:?} \\ {sb:?}"));
        }
        let (n, m) = (sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut lu = self.value(a).data().to_vec();
        let mut x = self.value(b).data().to_vec();
        let mut piv = vec![0; batch * n];
        for bi in 0..batch {
            let f = &mut lu[bi * n * n..(bi + 1) * n * n];
            let p = &mut piv[bi * n..(bi + 1) * n];
            lu_factor(f, n, p).map_err(|_| AutodiffError::Singular { batch: bi })?;
            lu_solve(f, n, p, &mut x[bi * n * m..(bi + 1) * n * m], m);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(sb, x), Op::Solve { a, b, lu, piv }, ng))
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every trainable leaf
    /// created before it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        grads.truncate(root.0 + 1);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.reduce_broadcast(*a, g, 1.0, grads);
                self.reduce_broadcast(*b, g, sign, grads);
            }
            Op::Mul(a, b) => {
                let out = g.shape();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, ta.shape());
                    walk_broadcast(out, &sa, &sb, |i, ia, ib| ga[ia] += gd[i] * tb.data()[ib]);
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, tb.shape());
                    walk_broadcast(out, &sa, &sb, |i, ia, ib| gb[ib] += gd[i] * ta.data()[ia]);
                }
            }
            Op::Scale(x, c) => {
                let gx = grad_slot(grads, *x, g.shape());
                for (d, s) in gx.iter_mut().zip(gd) {
                    *d += c * s;
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let shape = self.shape(*x);
                let gx = grad_slot(grads, *x, shape);
                for (d, s) in gx.iter_mut().zip(gd) {
                    *d += s;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let gx = grad_slot(grads, *x, g.shape());
                for i in 0..gx.len() {
                    let d = match kind {
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / xv[i],
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Sin => xv[i].cos(),
                        Unary::Cos => -xv[i].sin(),
                        Unary::Recip => -y[i] * y[i],
                        Unary::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Elu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                y[i] + 1.0
                            }
                        }
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                    };
                    gx[i] += gd[i] * d;
                }
            }
            Op::MatMul(a, b) => {
                let d = matmul_dims(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (m, k, n) = (d.m, d.k, d.n);
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, ta.shape());
                    if d.a_batched && !d.b_batched {
                        gemm(d.batch * m, n, k, gd, false, tb.data(), true, ga, true);
                    } else {
                        for bi in 0..d.batch {
                            let gs = &gd[bi * m * n..(bi + 1) * m * n];
                            let sb = if d.b_batched { &tb.data()[bi * k * n..(bi + 1) * k * n] } else { tb.data() };
                            let dst = if d.a_batched { &mut ga[bi * m * k..(bi + 1) * m * k] } else { &mut ga[..] };
                            gemm(m, n, k, gs, false, sb, true, dst, true);
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, tb.shape());
                    if d.a_batched && !d.b_batched {
                        gemm(k, d.batch * m, n, ta.data(), true, gd, false, gb, true);
                    } else {
                        for bi in 0..d.batch {
                            let gs = &gd[bi * m * n..(bi + 1) * m * n];
                            let sa = if d.a_batched { &ta.data()[bi * m * k..(bi + 1) * m * k] } else { ta.data() };
                            let dst = if d.b_batched { &mut gb[bi * k * n..(bi + 1) * k * n] } else { &mut gb[..] };
                            gemm(k, m, n, sa, true, gs, false, dst, true);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = g.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let batch = g.numel() / (rows * cols).max(1);
                let mut t = vec![0.0; g.numel()];
                transpose_into(gd, batch, rows, cols, &mut t);
                let gx = grad_slot(grads, *x, self.shape(*x));
                for (d, s) in gx.iter_mut().zip(&t) {
                    *d += s;
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let total = g.shape()[*axis] * inner;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let gp = grad_slot(grads, p, self.shape(p));
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let w = g.shape()[*axis];
                let gx = grad_slot(grads, *x, xs);
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + w) * inner];
                    for (d, s) in dst.iter_mut().zip(&gd[o * w * inner..(o + 1) * w * inner]) {
                        *d += s;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let xs = self.shape(*x);
                let numel: usize = xs.iter().product();
                let s = if matches!(node.op, Op::Mean(_)) { gd[0] / numel as f64 } else { gd[0] };
                for d in grad_slot(grads, *x, xs) {
                    *d += s;
                }
            }
            Op::SumAxis(x, axis) => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let gx = grad_slot(grads, *x, xs);
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Norm(x, axis) => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let gx = grad_slot(grads, *x, tx.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let nv = y[o * inner + i];
                        if nv == 0.0 {
                            continue;
                        }
                        let s = gd[o * inner + i] / nv;
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            gx[idx] += s * tx.data()[idx];
                        }
                    }
                }
            }
            Op::MinAxis { x, arg } | Op::MaxPool { x, arg } => {
                let gx = grad_slot(grads, *x, self.shape(*x));
                for (&a, &s) in arg.iter().zip(gd) {
                    gx[a] += s;
                }
            }
            Op::Gap(x) => {
                let xs = self.shape(*x);
                let len = xs[2];
                let gx = grad_slot(grads, *x, xs);
                for (r, &s) in gd.iter().enumerate() {
                    for d in &mut gx[r * len..(r + 1) * len] {
                        *d += s / len as f64;
                    }
                }
            }
            Op::Conv1d { x, w, b, cols } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (batch, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let width = batch * len;
                let mut gy = vec![0.0; cout * width];
                for bi in 0..batch {
                    for co in 0..cout {
                        gy[co * width + bi * len..co * width + (bi + 1) * len]
                            .copy_from_slice(&gd[(bi * cout + co) * len..(bi * cout + co + 1) * len]);
                    }
                }
                if self.needs(*w) {
                    let gw = grad_slot(grads, *w, &sw);
                    gemm(cout, width, cin * k, &gy, false, cols, true, gw, true);
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, &[cout]);
                    for co in 0..cout {
                        gb[co] += gy[co * width..(co + 1) * width].iter().sum::<f64>();
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; cin * k * width];
                    gemm(cin * k, cout, width, self.value(*w).data(), true, &gy, false, &mut dcols, false);
                    let gx = grad_slot(grads, *x, &sx);
                    kernels::col2im(&dcols, batch, cin, len, k, gx);
                }
            }
            Op::LogDetSpd { x, inv } => {
                let xs = self.shape(*x);
                let n = xs[xs.len() - 1];
                let gx = grad_slot(grads, *x, xs);
                for (bi, &s) in gd.iter().enumerate() {
                    for (d, v) in gx[bi * n * n..(bi + 1) * n * n].iter_mut().zip(&inv[bi * n * n..(bi + 1) * n * n]) {
                        *d += s * v;
                    }
                }
            }
            Op::Solve { a, b, lu, piv } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let n = sa[r - 1];
                let m = g.shape()[r - 1];
                let batch = lu.len() / (n * n).max(1);
                // ḡ_b = A⁻ᵀ ḡ
                let mut gb = gd.to_vec();
                for bi in 0..batch {
                    lu_solve_transposed(
                        &lu[bi * n * n..(bi + 1) * n * n],
                        n,
                        &piv[bi * n..(bi + 1) * n],
                        &mut gb[bi * n * m..(bi + 1) * n * m],
                        m,
                    );
                }
                if self.needs(*a) {
                    // ḡ_A = −ḡ_b Xᵀ
                    let ga = grad_slot(grads, *a, sa);
                    let neg: Vec<f64> = gb.iter().map(|v| -v).collect();
                    for bi in 0..batch {
                        gemm(
                            n,
                            m,
                            n,
                            &neg[bi * n * m..(bi + 1) * n * m],
                            false,
                            &y[bi * n * m..(bi + 1) * n * m],
                            true,
                            &mut ga[bi * n * n..(bi + 1) * n * n],
                            true,
                        );
                    }
                }
                if self.needs(*b) {
                    let dst = grad_slot(grads, *b, g.shape());
                    for (d, s) in dst.iter_mut().zip(&gb) {
                        *d += s;
                    }
                }
            }
        }
    }

    /// Adds `sign · g` into the gradient of `v`, summing over broadcast axes.
    fn reduce_broadcast(&self, v: Var, g: &Tensor, sign: f64, grads: &mut [Option<Tensor>]) {
        if !self.needs(v) {
            return;
        }
        let shape = self.shape(v);
        let gv = grad_slot(grads, v, shape);
        if shape == g.shape() {
            for (d, s) in gv.iter_mut().zip(g.data()) {
                *d += sign * s;
            }
            return;
        }
        let sv = broadcast_strides(shape, g.shape());
        let gd = g.data();
        walk_broadcast(g.shape(), &sv, &sv, |i, iv, _| gv[iv] += sign * gd[i]);
    }
}

fn transpose_into(src: &[f64], batch: usize, rows: usize, cols: usize, dst: &mut [f64]) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
}
