//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so the
//! tape is always topologically sorted and [`Tape::backward`] is a single
//! reverse sweep.

use super::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: T },
    Exp(Var),
    Gelu(Var),
    Softplus(Var),
    Silu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, group: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Chamfer {
        a: Var,
        b: Var,
        groups: usize,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
    SsmScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / (T::one() + (two * u).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + tanh_exp(c * (x + k * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let t = tanh_exp(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the debug-build finiteness assertion on or off for this tape.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on && cfg!(debug_assertions);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if self.check_finite
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            panic!("{name} produced non-finite values from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            T::zero(),
        );
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b], "matmul"))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), n, k).t(),
            &mut out,
            T::zero(),
        );
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b], "matmul_nt"))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b], "mul"))
    }

    /// Adds a length-`c` row vector to every row of an `n×c` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::dim(
                "add_row",
                format!("{} columns vs row of {}", c, self.value(row).len()),
            ));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row], "add_row"))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x), &[x], "exp")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.push(value, Op::Softplus(x), &[x], "softplus")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x], "silu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    /// Row-wise normalization to zero mean / unit (population) variance,
    /// followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps >= T::zero()) {
            return Err(Error::Contract(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "width {} vs gamma {} / beta {}",
                    d,
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
            "layer_norm",
        ))
    }

    /// Row softmax of `x + mask`; mask entries are 0 (keep) or −∞ (drop).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (n, m) = self.mat(x, "softmax_rows")?;
        if let Some(mk) = mask {
            if mk.shape() != [n, m] {
                return Err(Error::dim(
                    "softmax_rows",
                    format!("mask {:?} vs logits {n}x{m}", mk.shape()),
                ));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * m];
        for r in 0..n {
            let logits = &xv[r * m..(r + 1) * m];
            let shifted = |j: usize| match mask {
                Some(mk) => logits[j] + mk.data()[r * m + j],
                None => logits[j],
            };
            let mx = (0..m)
                .map(shifted)
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            if mx == T::neg_infinity() || mx.is_nan() {
                return Err(Error::DegenerateRow { row: r });
            }
            let orow = &mut out[r * m..(r + 1) * m];
            let mut total = T::zero();
            for (j, o) in orow.iter_mut().enumerate() {
                let v = shifted(j);
                *o = if v == T::neg_infinity() {
                    T::zero()
                } else {
                    (v - mx).exp()
                };
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(value, Op::Softmax(x), &[x], "softmax_rows"))
    }

    /// Row `j` of the result is row `idx[j]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(idx)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "gather_rows",
        ))
    }

    /// Channel-wise max over consecutive groups of `group` rows.
    /// Ties route the gradient to the first row of the group.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim(
                "segment_max",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let g = rows / group;
        let data = xv.data();
        let mut out = vec![T::zero(); g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            let base = gi * group;
            let orow = &mut out[gi * d..(gi + 1) * d];
            let arow = &mut argmax[gi * d..(gi + 1) * d];
            orow.copy_from_slice(&data[base * d..(base + 1) * d]);
            arow.fill(base);
            for r in base + 1..base + group {
                let src = &data[r * d..(r + 1) * d];
                for c in 0..d {
                    if src[c] > orow[c] {
                        orow[c] = src[c];
                        arow[c] = r;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![g, d], out);
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x], "segment_max"))
    }

    /// Channel-wise mean over consecutive groups of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim(
                "segment_mean",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let g = rows / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); g * d];
        for r in 0..rows {
            let gi = r / group;
            for (o, &v) in out[gi * d..(gi + 1) * d].iter_mut().zip(xv.row(r)) {
                *o += v * inv;
            }
        }
        let value = Tensor::from_parts(vec![g, d], out);
        Ok(self.push(value, Op::SegmentMean { x, group }, &[x], "segment_mean"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).cols()).collect();
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if parts.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows"))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}, {}) out of {c} columns", start + len),
            ));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::from_parts(vec![rows, len], out);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x], "slice_cols"))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("[{start}, {}) out of {rows} rows", start + len),
            ));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_parts(shape, xv.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(value, Op::SliceRows { x, start }, &[x], "slice_rows"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x], "reshape"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len().max(1) as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::Mean(x), &[x], "mean")
    }

    /// Mean over `groups` of the squared-L2 Chamfer distance between
    /// consecutive row blocks of `a` and `b`.
    pub fn chamfer(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let dim = av.cols();
        if bv.cols() != dim {
            return Err(Error::dim("chamfer", format!("point widths {} vs {}", dim, bv.cols())));
        }
        if groups == 0 || av.rows() % groups != 0 || bv.rows() % groups != 0 {
            return Err(Error::dim(
                "chamfer",
                format!("{} / {} rows not divisible into {groups} groups", av.rows(), bv.rows()),
            ));
        }
        let (n, m) = (av.rows() / groups, bv.rows() / groups);
        if n == 0 || m == 0 {
            return Err(Error::count("chamfer", "empty point set"));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut nn_ab = vec![0usize; av.rows()];
        let mut nn_ba = vec![0usize; bv.rows()];
        let mut best_b = vec![T::zero(); m];
        let mut total = T::zero();
        for g in 0..groups {
            let (a0, b0) = (g * n, g * m);
            let mut sum_a = T::zero();
            best_b.fill(T::infinity());
            for i in a0..a0 + n {
                let pa = &ad[i * dim..(i + 1) * dim];
                let mut best = T::infinity();
                for j in b0..b0 + m {
                    let pb = &bd[j * dim..(j + 1) * dim];
                    let d2 = sq_dist(pa, pb);
                    if d2 < best {
                        best = d2;
                        nn_ab[i] = j;
                    }
                    if d2 < best_b[j - b0] {
                        best_b[j - b0] = d2;
                        nn_ba[j] = i;
                    }
                }
                sum_a += best;
            }
            let sum_b: T = best_b.iter().copied().sum();
            total += sum_a / T::of(n as f64) + sum_b / T::of(m as f64);
        }
        let value = Tensor::scalar(total / T::of(groups as f64));
        Ok(self.push(
            value,
            Op::Chamfer {
                a,
                b,
                groups,
                nn_ab,
                nn_ba,
            },
            &[a, b],
            "chamfer",
        ))
    }

    /// Diagonal selective scan.
    ///
    /// For `x, delta: N×D`, `a: D×S`, `b, c: N×S`:
    /// `h_t = exp(Δ_t·A) ⊙ h_{t−1} + Δ_t·B_t·x_t`, `y_t = C_t·h_t`.
    pub fn ssm_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (n, d) = self.mat(x, "ssm_scan")?;
        let (ad, s) = self.mat(a, "ssm_scan")?;
        if self.shape(delta) != [n, d] || ad != d || self.shape(b) != [n, s] || self.shape(c) != [n, s]
        {
            return Err(Error::dim(
                "ssm_scan",
                format!(
                    "x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                    self.shape(x),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c)
                ),
            ));
        }
        let (xv, dv, av, bv, cv) = (
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut h = vec![T::zero(); d * s];
        let mut states = Vec::with_capacity(n * d * s);
        let mut y = vec![T::zero(); n * d];
        for t in 0..n {
            let (bt, ct) = (&bv[t * s..(t + 1) * s], &cv[t * s..(t + 1) * s]);
            for i in 0..d {
                let dt = dv[t * d + i];
                let u = dt * xv[t * d + i];
                let hi = &mut h[i * s..(i + 1) * s];
                let ai = &av[i * s..(i + 1) * s];
                let mut acc = T::zero();
                for k in 0..s {
                    hi[k] = (dt * ai[k]).exp() * hi[k] + u * bt[k];
                    acc += ct[k] * hi[k];
                }
                y[t * d + i] = acc;
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::Stability { step: t });
            }
            states.extend_from_slice(&h);
        }
        let value = Tensor::from_parts(vec![n, d], y);
        Ok(self.push(
            value,
            Op::SsmScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            },
            &[x, delta, a, b, c],
            "ssm_scan",
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, classes) = self.mat(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * classes];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        let value = Tensor::scalar(loss / T::of(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        ))
    }

    /// Affine map `x·w (+ bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            self.shape(loss).to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data.as_mut_slice())
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = g.cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let gm = MatRef::new(gd, m, n);
                if let Some(da) = self.acc(grads, *a) {
                    // non-transposed: dA = G·Bᵀ, B is k×n; transposed: dA = G·B, B is n×k
                    let bm = if *trans_b {
                        MatRef::new(bd, n, k)
                    } else {
                        MatRef::new(bd, k, n).t()
                    };
                    gemm(gm, bm, da, T::one());
                }
                if let Some(db) = self.acc(grads, *b) {
                    let am = MatRef::new(ad, m, k);
                    if *trans_b {
                        gemm(gm.t(), am, db, T::one());
                    } else {
                        gemm(am.t(), gm, db, T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in d.iter_mut().zip(gd).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, gd);
                }
                let c = g.cols();
                if let Some(d) = self.acc(grads, *row) {
                    for chunk in gd.chunks(c.max(1)) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * *factor);
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gv), &yv) in d.iter_mut().zip(gd).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Gelu(x) | Op::Softplus(x) | Op::Silu(x) | Op::Relu(x) => {
                let xv = self.value(*x).data();
                let deriv: fn(T) -> T = match &node.op {
                    Op::Gelu(_) => gelu_grad,
                    Op::Softplus(_) => sigmoid,
                    Op::Silu(_) => |v| {
                        let s = sigmoid(v);
                        s * (T::one() + v * (T::one() - s))
                    },
                    _ => |v| if v > T::zero() { T::one() } else { T::zero() },
                };
                if let Some(d) = self.acc(grads, *x) {
                    for ((o, &gv), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *o += gv * deriv(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let dcols = xv.cols();
                let gam = self.value(*gamma).data();
                let dn = T::of(dcols as f64);
                let mut xhat = vec![T::zero(); dcols];
                let mut dxhat = vec![T::zero(); dcols];
                let mut dgamma = vec![T::zero(); dcols];
                let mut dbeta = vec![T::zero(); dcols];
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = &gd[r * dcols..(r + 1) * dcols];
                    for j in 0..dcols {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = grow[j] * gam[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / dn;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..dcols {
                        dx[r * dcols + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, &dx);
                }
                if let Some(d) = self.acc(grads, *gamma) {
                    add_into(d, &dgamma);
                }
                if let Some(d) = self.acc(grads, *beta) {
                    add_into(d, &dbeta);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &gd[r * m..(r + 1) * m]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..m {
                            d[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (j, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &gd[j * c..(j + 1) * c]);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let c = node.value.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (k, (&r, &gv)) in argmax.iter().zip(gd).enumerate() {
                        d[r * c + k % c] += gv;
                    }
                }
            }
            Op::SegmentMean { x, group } => {
                let c = node.value.cols();
                let inv = T::one() / T::of(*group as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for (r, chunk) in d.chunks_mut(c).enumerate() {
                        let gi = r / group;
                        for (o, &gv) in chunk.iter_mut().zip(&gd[gi * c..(gi + 1) * c]) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for (r, chunk) in d.chunks_mut(w.max(1)).enumerate() {
                            add_into(chunk, &gd[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        add_into(d, &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (c, w) = (self.value(*x).cols(), node.value.cols());
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut d[r * c + start..r * c + start + w],
                            &gd[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    add_into(&mut d[start * c..start * c + gd.len()], gd);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, gd);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len().max(1) as f64);
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|o| *o += gd[0] / n);
                }
            }
            Op::Chamfer {
                a,
                b,
                groups,
                nn_ab,
                nn_ba,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dim = av.cols();
                let (n, m) = (av.rows() / groups, bv.rows() / groups);
                let scale = gd[0] / T::of(*groups as f64);
                let (wa, wb) = (
                    T::of(2.0) * scale / T::of(n as f64),
                    T::of(2.0) * scale / T::of(m as f64),
                );
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    for k in 0..dim {
                        let diff = av.data()[i * dim + k] - bv.data()[j * dim + k];
                        da[i * dim + k] += wa * diff;
                        db[j * dim + k] -= wa * diff;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for k in 0..dim {
                        let diff = bv.data()[j * dim + k] - av.data()[i * dim + k];
                        db[j * dim + k] += wb * diff;
                        da[i * dim + k] -= wb * diff;
                    }
                }
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, &da);
                }
                if let Some(d) = self.acc(grads, *b) {
                    add_into(d, &db);
                }
            }
            Op::SsmScan {
                x,
                delta,
                a,
                b,
                c,
                states,
            } => {
                let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                let s = self.value(*a).cols();
                let (xv, dv, av, bv, cv) = (
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                );
                let mut dx = vec![T::zero(); n * d];
                let mut ddelta = vec![T::zero(); n * d];
                let mut da = vec![T::zero(); d * s];
                let mut db = vec![T::zero(); n * s];
                let mut dc = vec![T::zero(); n * s];
                let mut dh = vec![T::zero(); d * s];
                for t in (0..n).rev() {
                    let ht = &states[t * d * s..(t + 1) * d * s];
                    let hprev = (t > 0).then(|| &states[(t - 1) * d * s..t * d * s]);
                    for i in 0..d {
                        let gy = gd[t * d + i];
                        let dt = dv[t * d + i];
                        let xt = xv[t * d + i];
                        let mut d_dt = T::zero();
                        let mut d_x = T::zero();
                        for k in 0..s {
                            let hs = i * s + k;
                            dh[hs] += gy * cv[t * s + k];
                            dc[t * s + k] += gy * ht[hs];
                            let aik = av[hs];
                            let abar = (dt * aik).exp();
                            let hp = hprev.map_or(T::zero(), |h| h[hs]);
                            let d_abar = dh[hs] * hp;
                            d_dt += d_abar * abar * aik + dh[hs] * bv[t * s + k] * xt;
                            da[hs] += d_abar * abar * dt;
                            db[t * s + k] += dh[hs] * dt * xt;
                            d_x += dh[hs] * dt * bv[t * s + k];
                            dh[hs] *= abar;
                        }
                        ddelta[t * d + i] += d_dt;
                        dx[t * d + i] += d_x;
                    }
                }
                for (v, buf) in [(*x, dx), (*delta, ddelta), (*a, da), (*b, db), (*c, dc)] {
                    if let Some(dst) = self.acc(grads, v) {
                        add_into(dst, &buf);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                let scale = gd[0] / T::of(labels.len() as f64);
                if let Some(d) = self.acc(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let p = probs[r * classes + j];
                            let y = if j == l { T::one() } else { T::zero() };
                            d[r * classes + j] += (p - y) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(T::zero(), |s, v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::from_fn(&[3, 4], |k| k as f64 + 1.0));
        let out = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(&[3, 4], |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
        let b = Tensor::from_fn(&[4, 2], |i| ((i * 5 + 1) % 13) as f64 / 6.0 - 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert!(tape.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = tape.constant(b.transpose().unwrap());
        let c2 = tape.matmul_nt(va, bt).unwrap();
        assert!(tape.value(c2).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_with_identity_is_exact() {
        let a = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.731).sin());
        let b = Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.37).cos());
        let mut tape = Tape::new();
        let (va, vb, vi) = (
            tape.constant(a),
            tape.constant(b),
            tape.constant(Tensor::eye(4)),
        );
        let ai = tape.matmul(va, vi).unwrap();
        let lhs = tape.matmul(ai, vb).unwrap();
        let rhs = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(lhs), tape.value(rhs));
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let want = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }

        let c = tape.constant(t(&[1, 4], &[3., 3., 3., 3.]));
        let g4 = tape.constant(Tensor::ones(&[4]));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_width_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 2f64.ln(), 7.0, 7.0]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);

        let x = tape.constant(t(&[1, 3], &[5.0, f64::NEG_INFINITY, 5.0]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = t(&[2, 2], &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            tape.softmax_rows(x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn gather_rows_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let same = tape.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let rev = tape.gather_rows(x, &[2, 1, 0]).unwrap();
        assert_eq!(tape.value(rev).data(), &[5., 6., 3., 4., 1., 2.]);
        assert!(matches!(
            tape.gather_rows(x, &[3]),
            Err(Error::Index { index: 3, .. })
        ));

        let rep = tape.gather_rows(x, &[0, 0]).unwrap();
        let loss = tape.sum(rep);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 2., 0., 0., 0., 0.]);
    }

    #[test]
    fn segment_max_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[1., 5., 3., 2.]));
        let y = tape.segment_max(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 3.]);
        let id = tape.segment_max(x, 1).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        assert!(tape.segment_max(x, 3).is_err());

        let tie = tape.leaf(t(&[2, 1], &[2., 2.]));
        let m = tape.segment_max(tie, 2).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(tie).unwrap().data(), &[1., 0.]);
    }

    #[test]
    fn backward_closed_forms() {
        let mut tape = Tape::new();
        let xs = t(&[3, 1], &[0.5, -1.5, 2.0]);
        let x = tape.leaf(xs.clone());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(xs.clone());
        let xt = tape.leaf(xs.clone().reshape(&[1, 3]).unwrap());
        let q = tape.matmul(xt, x).unwrap();
        let loss = tape.sum(q);
        let g = tape.backward(loss).unwrap();
        // xᵀx with x appearing on both sides: each side receives x
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(xs.data()) {
            assert!((gv - xv).abs() < 1e-15);
        }
        for (gv, xv) in g.get(xt).unwrap().data().iter().zip(xs.data()) {
            assert!((gv - xv).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ssm_scan_hand_recurrence() {
        // abar = exp(ln2 · -1) = 0.5, bbar = ln2 · (1/ln2) = 1
        let ln2 = 2f64.ln();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1., 0., 0.]));
        let delta = tape.constant(Tensor::full(&[3, 1], ln2));
        let a = tape.constant(t(&[1, 1], &[-1.0]));
        let b = tape.constant(Tensor::full(&[3, 1], 1.0 / ln2));
        let c = tape.constant(Tensor::ones(&[3, 1]));
        let y = tape.ssm_scan(x, delta, a, b, c).unwrap();
        for (v, w) in tape.value(y).data().iter().zip([1.0, 0.5, 0.25]) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ssm_scan_reports_instability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[4, 1]));
        let delta = tape.constant(Tensor::ones(&[4, 1]));
        let a = tape.constant(t(&[1, 1], &[800.0]));
        let b = tape.constant(Tensor::ones(&[4, 1]));
        let c = tape.constant(Tensor::ones(&[4, 1]));
        assert!(matches!(
            tape.ssm_scan(x, delta, a, b, c),
            Err(Error::Stability { .. })
        ));
    }

    #[test]
    fn chamfer_hand_value() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], &[0., 0., 0.]));
        let b = tape.constant(t(&[1, 3], &[1., 0., 0.]));
        let cd = tape.chamfer(a, b, 1).unwrap();
        assert_eq!(tape.value(cd).item(), 2.0);
        let same = tape.chamfer(a, a, 1).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.cross_entropy(l, &[0, 3]), Err(Error::Data(_))));
        let loss = tape.cross_entropy(l, &[0, 2]).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }
}
