use std::borrow::Cow;

use super::kernels::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, split_axis};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Debug)]
pub enum BatchNormMode<'s> {
    /// Statistics of the input rows themselves (training).
    Batch,
    /// Externally supplied statistics, treated as constants.
    Running { mean: &'s [f64], var: &'s [f64] },
}

/// First and second moments of the rows a batch-norm node saw.
///
/// Kept as raw sums so observations from several graphs can be pooled
/// before updating running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl BatchStats {
    pub fn empty(width: usize) -> Self {
        Self { count: 0, sum: vec![0.0; width], sum_sq: vec![0.0; width] }
    }

    pub fn merge(&mut self, other: &BatchStats) {
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.sum_sq.iter_mut().zip(&other.sum_sq).for_each(|(a, b)| *a += b);
    }

    /// Pooled mean and biased variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        (mean, var)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, i: usize, o: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, n: usize, d: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    ReduceSum { a: Var, outer: usize, len: usize, inner: usize },
    ReduceMax { a: Var, len: usize, inner: usize, argmax: Vec<usize> },
    L2Norm { a: Var, outer: usize, len: usize, inner: usize },
    Reshape(Var),
    Transpose { a: Var, n: usize, m: usize },
    GatherRows { a: Var, idx: Vec<usize>, d: usize },
    WeightedGather { a: Var, idx: Vec<usize>, w: Vec<f64>, k: usize, d: usize },
    Squash { a: Var, d: usize },
    NormalizeRows { a: Var, d: usize },
    CapsulePredict { u: Var, w: Var, i: usize, j: usize, dc: usize, dd: usize },
    CouplingSum { c: Var, uhat: Var, i: usize, j: usize, d: usize },
    Agreement { uhat: Var, v: Var, i: usize, j: usize, d: usize },
    Vlad { p: Var, a: Var, q: Var, n: usize, k: usize, d: usize },
    MarginLoss { lengths: Var, label: usize, m_plus: f64, m_minus: f64, lambda: f64 },
    Chamfer { pred: Var, target: Vec<f64>, to_pred: Vec<usize>, to_target: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, p: usize },
    SumAll(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward is one reverse sweep.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Graph::backward`]: gradients of every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, d)| *d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// Borrows a tensor as a leaf; gradients are tracked if the tensor requires them.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Moves an owned tensor into the graph as a leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let Tensor { data, .. } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(self.value(a), self.value(b), &mut out, n, k, m);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(vec![n, m], Cow::Owned(out), Op::MatMul { a, b, n, k, m }, rg))
    }

    /// `x[n,i] * w[i,o] + b[o]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("linear", format!("input {sx:?} against weight {sw:?}")));
        }
        let (n, i, o) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::shape("linear", format!("bias of length {} for {o} outputs", bv.len())));
            }
            out.chunks_mut(o).for_each(|row| row.copy_from_slice(bv));
        }
        gemm_acc(self.value(x), self.value(w), &mut out, n, i, o);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_any(&deps);
        Ok(self.push(vec![n, o], Cow::Owned(out), Op::Linear { x, w, b, n, i, o }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[c * n + r] = av[r * m + c];
            }
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::Transpose { a, n, m }, rg))
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.grad_any(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.grad_any(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let rg = self.grad_any(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Sigmoid(a), rg)
    }

    // ----- axis ops -----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {s:?}")));
        }
        Ok(split_axis(s, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", a, axis)?;
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(av[base + t * inner]);
                }
                let mut z = 0.0;
                for t in 0..len {
                    let e = (av[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    z += e;
                }
                for t in 0..len {
                    out[base + t * inner] /= z;
                }
            }
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax { a, outer, len, inner }, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("reduce-sum", a, axis)?;
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let src = &av[(o * len + t) * inner..(o * len + t + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let shape = reduced_shape(self.shape(a), axis);
        let rg = self.grad_any(&[a]);
        Ok(self.push(shape, Cow::Owned(out), Op::ReduceSum { a, outer, len, inner }, rg))
    }

    /// Maximum along `axis`; the first maximal index receives the gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("reduce-max", a, axis)?;
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    let x = av[(o * len + t) * inner + i];
                    let slot = o * inner + i;
                    if x > out[slot] {
                        out[slot] = x;
                        argmax[slot] = t;
                    }
                }
            }
        }
        let shape = reduced_shape(self.shape(a), axis);
        let rg = self.grad_any(&[a]);
        Ok(self.push(shape, Cow::Owned(out), Op::ReduceMax { a, len, inner, argmax }, rg))
    }

    /// Euclidean norm along `axis`.
    pub fn l2norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("l2norm", a, axis)?;
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for t in 0..len {
                    let x = av[(o * len + t) * inner + i];
                    s += x * x;
                }
                out[o * inner + i] = s.sqrt();
            }
        }
        let shape = reduced_shape(self.shape(a), axis);
        let rg = self.grad_any(&[a]);
        Ok(self.push(shape, Cow::Owned(out), Op::L2Norm { a, outer, len, inner }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} does not align with {base:?} on axis {axis}")));
            }
            lens.push((p, s[axis]));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().map(|(_, l)| l).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, l) in &lens {
                let v = self.value(p);
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.grad_any(parts);
        Ok(self.push(shape, Cow::Owned(out), Op::Concat { parts: lens, outer, inner }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.contains(&0) || numel(&shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.grad_any(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("expected a matrix, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(vec![idx.len(), d], Cow::Owned(out), Op::GatherRows { a, idx: idx.to_vec(), d }, rg))
    }

    /// Row `t` of the output is `sum_q w[t*k+q] * a[idx[t*k+q]]`.
    pub fn weighted_gather(&mut self, a: Var, idx: &[usize], w: &[f64], k: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || k == 0 || idx.len() != w.len() || !idx.len().is_multiple_of(k) || idx.is_empty() {
            return Err(Error::shape("weighted_gather", format!("source {s:?}, {} indices, {} weights, k={k}", idx.len(), w.len())));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("weighted_gather", format!("row {bad} out of range for {n} rows")));
        }
        let av = self.value(a);
        let t = idx.len() / k;
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &mut out[r * d..(r + 1) * d];
            for q in 0..k {
                let (src, wt) = (idx[r * k + q], w[r * k + q]);
                row.iter_mut().zip(&av[src * d..(src + 1) * d]).for_each(|(o, x)| *o += wt * x);
            }
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(vec![t, d], Cow::Owned(out), Op::WeightedGather { a, idx: idx.to_vec(), w: w.to_vec(), k, d }, rg))
    }

    // ----- normalization -----

    /// Per-feature normalization of a `[n, d]` matrix over its rows.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("expected [rows, features], got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("batchnorm", format!("affine params {:?}/{:?} for width {d}", self.shape(gamma), self.shape(beta))));
        }
        let xv = self.value(x);
        let mut stats = BatchStats::empty(d);
        stats.count = n;
        for row in xv.chunks(d) {
            for c in 0..d {
                stats.sum[c] += row[c];
                stats.sum_sq[c] += row[c] * row[c];
            }
        }
        let (mean, inv_std, batch) = match mode {
            BatchNormMode::Batch => {
                let mean: Vec<f64> = stats.sum.iter().map(|s| s / n as f64).collect();
                let mut var = vec![0.0; d];
                for row in xv.chunks(d) {
                    for c in 0..d {
                        let dv = row[c] - mean[c];
                        var[c] += dv * dv;
                    }
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + BN_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            BatchNormMode::Running { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::shape("batchnorm", format!("running stats of width {} for {d}", mean.len())));
                }
                (mean.to_vec(), var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(), false)
            }
        };
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let h = (xv[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                out[r * d + c] = gv[c] * h + bv[c];
            }
        }
        let rg = self.grad_any(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, n, d, xhat, inv_std, batch };
        Ok((self.push(vec![n, d], Cow::Owned(out), op, rg), stats))
    }

    fn last_axis_rows(&self, op: &'static str, a: Var) -> Result<usize> {
        let s = self.shape(a);
        s.last().copied().ok_or_else(|| Error::shape(op, "empty shape"))
    }

    /// Capsule nonlinearity applied to every vector along the last axis.
    pub fn squash(&mut self, a: Var) -> Result<Var> {
        let d = self.last_axis_rows("squash", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (row, o) in av.chunks(d).zip(out.chunks_mut(d)) {
            let n2 = dot(row, row);
            if n2 > 0.0 {
                let n = n2.sqrt();
                let f = n / (1.0 + n2);
                o.iter_mut().zip(row).for_each(|(y, x)| *y = f * x);
            }
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Squash { a, d }, rg))
    }

    /// Scales every vector along the last axis to unit length (zero rows stay zero).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.last_axis_rows("normalize_rows", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (row, o) in av.chunks(d).zip(out.chunks_mut(d)) {
            let n = dot(row, row).sqrt().max(NORM_EPS);
            o.iter_mut().zip(row).for_each(|(y, x)| *y = x / n);
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::NormalizeRows { a, d }, rg))
    }

    // ----- capsule and clustering kernels -----

    /// Prediction vectors `uhat[i,j] = u[i] * w[i,j]` with `u: [I, dc]`, `w: [I, J, dc, dd]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u), self.shape(w));
        if su.len() != 2 || sw.len() != 4 || su[0] != sw[0] || su[1] != sw[2] {
            return Err(Error::shape("capsule_predict", format!("capsules {su:?} against transforms {sw:?}")));
        }
        let (i, j, dc, dd) = (sw[0], sw[1], sw[2], sw[3]);
        let (uv, wv) = (self.value(u), self.value(w));
        let mut out = vec![0.0; i * j * dd];
        for a in 0..i {
            let ur = &uv[a * dc..(a + 1) * dc];
            for b in 0..j {
                let wm = &wv[(a * j + b) * dc * dd..(a * j + b + 1) * dc * dd];
                gemm_acc(ur, wm, &mut out[(a * j + b) * dd..(a * j + b + 1) * dd], 1, dc, dd);
            }
        }
        let rg = self.grad_any(&[u, w]);
        Ok(self.push(vec![i, j, dd], Cow::Owned(out), Op::CapsulePredict { u, w, i, j, dc, dd }, rg))
    }

    /// `s[j] = sum_i c[i,j] * uhat[i,j]`.
    pub fn coupling_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (sc, su) = (self.shape(c), self.shape(uhat));
        if sc.len() != 2 || su.len() != 3 || sc[0] != su[0] || sc[1] != su[1] {
            return Err(Error::shape("coupling_sum", format!("coupling {sc:?} against predictions {su:?}")));
        }
        let (i, j, d) = (su[0], su[1], su[2]);
        let (cv, uv) = (self.value(c), self.value(uhat));
        let mut out = vec![0.0; j * d];
        for a in 0..i {
            for b in 0..j {
                let cw = cv[a * j + b];
                let src = &uv[(a * j + b) * d..(a * j + b + 1) * d];
                out[b * d..(b + 1) * d].iter_mut().zip(src).for_each(|(o, x)| *o += cw * x);
            }
        }
        let rg = self.grad_any(&[c, uhat]);
        Ok(self.push(vec![j, d], Cow::Owned(out), Op::CouplingSum { c, uhat, i, j, d }, rg))
    }

    /// Scalar products `a[i,j] = uhat[i,j] . v[j]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(uhat), self.shape(v));
        if su.len() != 3 || sv.len() != 2 || su[1] != sv[0] || su[2] != sv[1] {
            return Err(Error::shape("agreement", format!("predictions {su:?} against outputs {sv:?}")));
        }
        let (i, j, d) = (su[0], su[1], su[2]);
        let (uv, vv) = (self.value(uhat), self.value(v));
        let mut out = vec![0.0; i * j];
        for a in 0..i {
            for b in 0..j {
                out[a * j + b] = dot(&uv[(a * j + b) * d..(a * j + b + 1) * d], &vv[b * d..(b + 1) * d]);
            }
        }
        let rg = self.grad_any(&[uhat, v]);
        Ok(self.push(vec![i, j], Cow::Owned(out), Op::Agreement { uhat, v, i, j, d }, rg))
    }

    /// Soft-assignment residual sums `out[k] = sum_i a[i,k] * (p[i] - q[k])`.
    pub fn vlad(&mut self, p: Var, assign: Var, centers: Var) -> Result<Var> {
        let (sp, sa, sq) = (self.shape(p), self.shape(assign), self.shape(centers));
        if sp.len() != 2 || sa.len() != 2 || sq.len() != 2 || sp[0] != sa[0] || sa[1] != sq[0] || sp[1] != sq[1] {
            return Err(Error::shape("vlad", format!("rows {sp:?}, assignment {sa:?}, centers {sq:?}")));
        }
        let (n, k, d) = (sp[0], sq[0], sp[1]);
        let (pv, av, qv) = (self.value(p), self.value(assign), self.value(centers));
        let mut out = vec![0.0; k * d];
        // sum_i a_ik p_i
        gemm_at_acc(av, pv, &mut out, n, k, d);
        for c in 0..k {
            let mass: f64 = (0..n).map(|r| av[r * k + c]).sum();
            for e in 0..d {
                out[c * d + e] -= mass * qv[c * d + e];
            }
        }
        let rg = self.grad_any(&[p, assign, centers]);
        Ok(self.push(vec![k, d], Cow::Owned(out), Op::Vlad { p, a: assign, q: centers, n, k, d }, rg))
    }

    // ----- losses -----

    /// Two-sided hinge on capsule lengths.
    pub fn margin_loss(&mut self, lengths: Var, label: usize, m_plus: f64, m_minus: f64, lambda: f64) -> Result<Var> {
        let lv = self.value(lengths);
        if label >= lv.len() {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", lv.len())));
        }
        let mut loss = 0.0;
        for (j, &v) in lv.iter().enumerate() {
            if j == label {
                loss += (m_plus - v).max(0.0).powi(2);
            } else {
                loss += lambda * (v - m_minus).max(0.0).powi(2);
            }
        }
        let rg = self.grad_any(&[lengths]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::MarginLoss { lengths, label, m_plus, m_minus, lambda }, rg))
    }

    /// Symmetric mean nearest-neighbour Euclidean distance between a fixed
    /// target set and predicted points (both `[_, 3]`).
    pub fn chamfer(&mut self, target: &[f64], pred: Var) -> Result<Var> {
        let sp = self.shape(pred);
        if sp.len() != 2 || sp[1] != 3 || target.is_empty() || !target.len().is_multiple_of(3) {
            return Err(Error::shape("chamfer", format!("prediction {sp:?}, target of {} values", target.len())));
        }
        let pv = self.value(pred);
        let (nt, np) = (target.len() / 3, sp[0]);
        let d2 = |a: &[f64], b: &[f64]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
        let nearest = |from: &[f64], pool: &[f64]| -> (usize, f64) {
            let mut best = (0usize, f64::INFINITY);
            for (c, cand) in pool.chunks(3).enumerate() {
                let dd = d2(from, cand);
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            best
        };
        let mut to_pred = Vec::with_capacity(nt);
        let mut fwd = 0.0;
        for x in target.chunks(3) {
            let (c, dd) = nearest(x, pv);
            to_pred.push(c);
            fwd += dd.sqrt();
        }
        let mut to_target = Vec::with_capacity(np);
        let mut bwd = 0.0;
        for p in pv.chunks(3) {
            let (c, dd) = nearest(p, target);
            to_target.push(c);
            bwd += dd.sqrt();
        }
        let loss = fwd / nt as f64 + bwd / np as f64;
        let rg = self.grad_any(&[pred]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::Chamfer { pred, target: target.to_vec(), to_pred, to_target }, rg))
    }

    /// Mean softmax cross-entropy of `[n, p]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let (n, p) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= p) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {p} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * p];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * p..(r + 1) * p];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            for c in 0..p {
                probs[r * p + c] = (row[c] - mx).exp() / z;
            }
            loss -= row[labels[r]] - mx - z.ln();
        }
        loss /= n as f64;
        let rg = self.grad_any(&[logits]);
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), Op::CrossEntropy { logits, labels: labels.to_vec(), probs, p }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.grad_any(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss. The graph is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, n, k, m } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| gemm_bt_acc(g, bv, ga, *n, *k, *m));
                acc(*b, &mut |gb| gemm_at_acc(av, g, gb, *n, *k, *m));
            }
            Op::Linear { x, w, b, n, i, o } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, &mut |gx| gemm_bt_acc(g, wv, gx, *n, *i, *o));
                acc(*w, &mut |gw| gemm_at_acc(xv, g, gw, *n, *i, *o));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(*o) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for t in 0..g.len() {
                        ga[t] += g[t] * bv[t];
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..g.len() {
                        gb[t] += g[t] * av[t];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for t in 0..g.len() {
                        if av[t] > 0.0 {
                            ga[t] += g[t];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for t in 0..g.len() {
                    ga[t] += g[t] * out[t] * (1.0 - out[t]);
                }
            }),
            Op::Softmax { a, outer, len, inner } => acc(*a, &mut |ga| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for t in 0..*len {
                            s += g[base + t * inner] * out[base + t * inner];
                        }
                        for t in 0..*len {
                            let at = base + t * inner;
                            ga[at] += out[at] * (g[at] - s);
                        }
                    }
                }
            }),
            Op::BatchNorm { x, gamma, beta, n, d, xhat, inv_std, batch } => {
                let (n, d) = (*n, *d);
                let gv = self.value(*gamma);
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        sum_g[c] += g[r * d + c];
                        sum_gx[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
                acc(*gamma, &mut |gg| gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b));
                acc(*beta, &mut |gb| gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b));
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        for c in 0..d {
                            let at = r * d + c;
                            if *batch {
                                let nf = n as f64;
                                gx[at] += gv[c] * inv_std[c] / nf * (nf * g[at] - sum_g[c] - xhat[at] * sum_gx[c]);
                            } else {
                                gx[at] += gv[c] * inv_std[c] * g[at];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, l) in parts {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                            gp[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += l;
                }
            }
            Op::ReduceSum { a, outer, len, inner } => acc(*a, &mut |ga| {
                for o in 0..*outer {
                    for t in 0..*len {
                        let dst = &mut ga[(o * len + t) * inner..(o * len + t + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, s)| *d += s);
                    }
                }
            }),
            Op::ReduceMax { a, len, inner, argmax, .. } => acc(*a, &mut |ga| {
                for (slot, &t) in argmax.iter().enumerate() {
                    let (o, i) = (slot / inner, slot % inner);
                    ga[(o * len + t) * inner + i] += g[slot];
                }
            }),
            Op::L2Norm { a, outer, len, inner } => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let nrm = out[o * inner + i];
                            if nrm == 0.0 {
                                continue;
                            }
                            let scale = g[o * inner + i] / nrm;
                            for t in 0..*len {
                                let at = (o * len + t) * inner + i;
                                ga[at] += scale * av[at];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
            Op::Transpose { a, n, m } => acc(*a, &mut |ga| {
                for r in 0..*n {
                    for c in 0..*m {
                        ga[r * m + c] += g[c * n + r];
                    }
                }
            }),
            Op::GatherRows { a, idx, d } => acc(*a, &mut |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, s)| *x += s);
                }
            }),
            Op::WeightedGather { a, idx, w, k, d } => acc(*a, &mut |ga| {
                for (slot, (&src, &wt)) in idx.iter().zip(w).enumerate() {
                    let r = slot / k;
                    let dst = &mut ga[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, s)| *x += wt * s);
                }
            }),
            Op::Squash { a, d } => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, gr), dst) in av.chunks(*d).zip(g.chunks(*d)).zip(ga.chunks_mut(*d)) {
                        let n2 = dot(x, x);
                        if n2 == 0.0 {
                            continue;
                        }
                        let n = n2.sqrt();
                        let f = n / (1.0 + n2);
                        let fp = (1.0 - n2) / (1.0 + n2).powi(2);
                        let xg = dot(x, gr);
                        let c = fp / n * xg;
                        for t in 0..*d {
                            dst[t] += f * gr[t] + c * x[t];
                        }
                    }
                });
            }
            Op::NormalizeRows { a, d } => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, (y, gr)), dst) in av.chunks(*d).zip(out.chunks(*d).zip(g.chunks(*d))).zip(ga.chunks_mut(*d)) {
                        let n = dot(x, x).sqrt();
                        if n <= NORM_EPS {
                            dst.iter_mut().zip(gr).for_each(|(o, s)| *o += s / NORM_EPS);
                            continue;
                        }
                        let yg = dot(y, gr);
                        for t in 0..*d {
                            dst[t] += (gr[t] - y[t] * yg) / n;
                        }
                    }
                });
            }
            Op::CapsulePredict { u, w, i, j, dc, dd } => {
                let (uv, wv) = (self.value(*u), self.value(*w));
                let (i, j, dc, dd) = (*i, *j, *dc, *dd);
                acc(*u, &mut |gu| {
                    for a in 0..i {
                        for b in 0..j {
                            let wm = &wv[(a * j + b) * dc * dd..(a * j + b + 1) * dc * dd];
                            gemm_bt_acc(&g[(a * j + b) * dd..(a * j + b + 1) * dd], wm, &mut gu[a * dc..(a + 1) * dc], 1, dc, dd);
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for a in 0..i {
                        for b in 0..j {
                            let gr = &g[(a * j + b) * dd..(a * j + b + 1) * dd];
                            let dst = &mut gw[(a * j + b) * dc * dd..(a * j + b + 1) * dc * dd];
                            gemm_at_acc(&uv[a * dc..(a + 1) * dc], gr, dst, 1, dc, dd);
                        }
                    }
                });
            }
            Op::CouplingSum { c, uhat, i, j, d } => {
                let (cv, uv) = (self.value(*c), self.value(*uhat));
                let (i, j, d) = (*i, *j, *d);
                acc(*c, &mut |gc| {
                    for a in 0..i {
                        for b in 0..j {
                            gc[a * j + b] += dot(&g[b * d..(b + 1) * d], &uv[(a * j + b) * d..(a * j + b + 1) * d]);
                        }
                    }
                });
                acc(*uhat, &mut |gu| {
                    for a in 0..i {
                        for b in 0..j {
                            let cw = cv[a * j + b];
                            let dst = &mut gu[(a * j + b) * d..(a * j + b + 1) * d];
                            dst.iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(x, s)| *x += cw * s);
                        }
                    }
                });
            }
            Op::Agreement { uhat, v, i, j, d } => {
                let (uv, vv) = (self.value(*uhat), self.value(*v));
                let (i, j, d) = (*i, *j, *d);
                acc(*uhat, &mut |gu| {
                    for a in 0..i {
                        for b in 0..j {
                            let s = g[a * j + b];
                            let dst = &mut gu[(a * j + b) * d..(a * j + b + 1) * d];
                            dst.iter_mut().zip(&vv[b * d..(b + 1) * d]).for_each(|(x, y)| *x += s * y);
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for a in 0..i {
                        for b in 0..j {
                            let s = g[a * j + b];
                            let src = &uv[(a * j + b) * d..(a * j + b + 1) * d];
                            gv[b * d..(b + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += s * y);
                        }
                    }
                });
            }
            Op::Vlad { p, a, q, n, k, d } => {
                let (pv, av, qv) = (self.value(*p), self.value(*a), self.value(*q));
                let (n, k, d) = (*n, *k, *d);
                acc(*p, &mut |gp| gemm_acc(av, g, gp, n, k, d));
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        let pr = &pv[r * d..(r + 1) * d];
                        for c in 0..k {
                            let gr = &g[c * d..(c + 1) * d];
                            let qr = &qv[c * d..(c + 1) * d];
                            let mut s = 0.0;
                            for e in 0..d {
                                s += gr[e] * (pr[e] - qr[e]);
                            }
                            ga[r * k + c] += s;
                        }
                    }
                });
                acc(*q, &mut |gq| {
                    for c in 0..k {
                        let mass: f64 = (0..n).map(|r| av[r * k + c]).sum();
                        for e in 0..d {
                            gq[c * d + e] -= mass * g[c * d + e];
                        }
                    }
                });
            }
            Op::MarginLoss { lengths, label, m_plus, m_minus, lambda } => {
                let lv = self.value(*lengths);
                acc(*lengths, &mut |gl| {
                    for (jj, &v) in lv.iter().enumerate() {
                        let dv = if jj == *label {
                            -2.0 * (m_plus - v).max(0.0)
                        } else {
                            2.0 * lambda * (v - m_minus).max(0.0)
                        };
                        gl[jj] += g[0] * dv;
                    }
                });
            }
            Op::Chamfer { pred, target, to_pred, to_target } => {
                let pv = self.value(*pred);
                let (nt, np) = (to_pred.len() as f64, to_target.len() as f64);
                acc(*pred, &mut |gp| {
                    let mut push = |pi: usize, ti: usize, weight: f64| {
                        let p = &pv[pi * 3..pi * 3 + 3];
                        let t = &target[ti * 3..ti * 3 + 3];
                        let diff = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
                        let dist = dot(&diff, &diff).sqrt();
                        if dist > 0.0 {
                            for e in 0..3 {
                                gp[pi * 3 + e] += g[0] * weight * diff[e] / dist;
                            }
                        }
                    };
                    for (ti, &pi) in to_pred.iter().enumerate() {
                        push(pi, ti, 1.0 / nt);
                    }
                    for (pi, &ti) in to_target.iter().enumerate() {
                        push(pi, ti, 1.0 / np);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs, p } => {
                let n = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for c in 0..*p {
                            let target = if c == lab { 1.0 } else { 0.0 };
                            gl[r * p + c] += g[0] * (probs[r * p + c] - target) / n;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}
