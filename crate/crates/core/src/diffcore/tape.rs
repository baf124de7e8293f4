//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! its backward rule needs. Nodes are only ever appended, so the node order
//! is a topological order and [`Tape::backward`] simply walks it in reverse.

use super::linalg::Cholesky;
use super::tensor::{
    axpy, dot, gemm_acc, gemm_acc_strided, gemm_nt_acc, gemm_nt_acc_strided, gemm_tn_acc, gemm_tn_acc_strided,
    Tensor,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    Glu { z: Var, gate: Vec<S> },
    Softmax {
        m: Var,
        tau: S,
    },
    Pinv {
        m: Var,
        inv_gram: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        training: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, S),
    SliceTime {
        x: Var,
        keep: usize,
    },
    Concat(Vec<Var>),
    GraphMix {
        p: Var,
        x: Var,
    },
    Transpose(Var),
    Reshape(Var),
    MeanAxis0(Var),
    SymNormalize {
        a: Var,
        inv_sqrt_deg: Vec<S>,
    },
    MaskedMae {
        pred: Var,
        target: Vec<S>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
///
/// A tape serves exactly one forward/backward cycle; running
/// [`backward`](Tape::backward) twice is an error.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn time_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape(op, format!("expected at least [T, C], got {shape:?}")));
    }
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` together with the `D̃^{-1/2}` diagonal.
pub(crate) fn sym_normalize_values<S: Scalar>(a: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::shape("normalize", format!("expected square matrix, got {:?}", a.shape())));
    }
    let n = a.rows();
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let deg: S = a.row(i).iter().copied().sum::<S>() + S::one();
        if !(deg > S::zero()) {
            return Err(Error::Numerical(format!(
                "node {i} has non-positive degree {deg} after adding the self-loop"
            )));
        }
        inv_sqrt.push(S::one() / deg.sqrt());
    }
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut v = a.at2(i, j);
            if i == j {
                v += S::one();
            }
            out.set2(i, j, inv_sqrt[i] * v * inv_sqrt[j]);
        }
    }
    Ok((out, inv_sqrt))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            debug_assert!(value.is_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Records a differentiable input whose gradient is collected by `backward`.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// `None` when `v` does not influence the target or does not require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient as a tensor, zeros when `v` did not receive any.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    // ---- linear maps -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Applies `w` (`C_in×C_out`) to the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w));
        let cin = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != cin {
            return Err(Error::shape("linear", format!("input {sx:?} incompatible with weight {sw:?}")));
        }
        let cout = sw[1];
        let rows = self.value(x).numel() / cin.max(1);
        let mut out = vec![S::zero(); rows * cout];
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, cin, cout);
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w }, &[x, w]))
    }

    /// Adds `b` (length `C`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match channel count of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    /// Valid cross-correlation along the time axis of `x` (`[.., T, C_in]`)
    /// with kernel `w` (`K×C_in×C_out`) plus `bias` (`C_out`).
    pub fn conv1d_time(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, t_in, cin) = time_dims("conv1d_time", &sx)?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sw[1] != cin {
            return Err(Error::shape(
                "conv1d_time",
                format!("kernel {sw:?} incompatible with input {sx:?}"),
            ));
        }
        let (k, cout) = (sw[0], sw[2]);
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "conv1d_time",
                format!("bias {:?} does not match C_out={cout}", self.shape(bias)),
            ));
        }
        if k == 0 || t_in < k {
            return Err(Error::TemporalUnderflow {
                context: "conv1d_time".into(),
                t: t_in,
                k,
            });
        }
        let t_out = t_in - k + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut out = vec![S::zero(); rows * t_out * cout];
        for r in 0..rows {
            let o = &mut out[r * t_out * cout..(r + 1) * t_out * cout];
            for row in o.chunks_mut(cout) {
                row.copy_from_slice(bd);
            }
            // Each output step reads a window of `k` consecutive input rows,
            // so the windows are overlapping rows of one strided GEMM.
            let xs = &xd[r * t_in * cin..(r + 1) * t_in * cin];
            gemm_acc_strided(xs, cin, wd, o, t_out, k * cin, cout);
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = t_out;
        shape[r - 1] = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b: bias, k }, &[x, w, bias]))
    }

    /// Rectangular node mixing: `p` is `N_out×N_in`, `x` is `[.., N_in, T, C]`.
    pub fn graph_mix(&mut self, p: Var, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sp = self.shape(p).to_vec();
        let r = sx.len();
        if r < 3 || sp.len() != 2 || sp[1] != sx[r - 3] {
            return Err(Error::shape(
                "graph_mix",
                format!("node operator {sp:?} incompatible with features {sx:?}"),
            ));
        }
        let (n_out, n_in) = (sp[0], sp[1]);
        let lead: usize = sx[..r - 3].iter().product();
        let block = sx[r - 2] * sx[r - 1];
        let xd = self.value(x).data();
        let pd = self.value(p).data();
        let mut out = vec![S::zero(); lead * n_out * block];
        for l in 0..lead {
            let xl = &xd[l * n_in * block..(l + 1) * n_in * block];
            let ol = &mut out[l * n_out * block..(l + 1) * n_out * block];
            gemm_acc(pd, xl, ol, n_out, n_in, block);
        }
        let mut shape = sx;
        shape[r - 3] = n_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GraphMix { p, x }, &[p, x]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", self.shape(a))));
        }
        let value = self.value(a).transpose2();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Mean over the leading axis: `[B, ..] -> [..]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || sa[0] == 0 {
            return Err(Error::shape("mean_axis0", format!("expected non-empty [B, ..], got {sa:?}")));
        }
        let b = sa[0];
        let inner = self.value(a).numel() / b;
        let ad = self.value(a).data();
        let mut out = vec![S::zero(); inner];
        for chunk in ad.chunks(inner) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = S::one() / S::of_usize(b);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(sa[1..].to_vec(), out)?;
        Ok(self.push(value, Op::MeanAxis0(a), &[a]))
    }

    // ---- nonlinearities ----------------------------------------------------

    /// Gated linear unit over the last axis: first half `P`, second half `Q`,
    /// output `P ⊙ σ(Q)`.
    pub fn glu(&mut self, z: Var) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        let c2 = *sz.last().unwrap_or(&0);
        if c2 == 0 || c2 % 2 != 0 {
            return Err(Error::shape("glu", format!("last dimension must be even, got {sz:?}")));
        }
        let c = c2 / 2;
        let zd = self.value(z).data();
        let mut out = Vec::with_capacity(zd.len() / 2);
        let mut gate = Vec::with_capacity(zd.len() / 2);
        for row in zd.chunks(c2) {
            let (p, q) = row.split_at(c);
            for (&pv, &qv) in p.iter().zip(q) {
                let s = sigmoid(qv);
                gate.push(s);
                out.push(pv * s);
            }
        }
        let mut shape = sz;
        *shape.last_mut().unwrap() = c;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Glu { z, gate }, &[z]))
    }

    /// Row-wise softmax of `m / tau` for a 2-D `m`.
    pub fn softmax_rows(&mut self, m: Var, tau: S) -> Result<Var> {
        if !(tau > S::zero()) {
            return Err(Error::Param(format!("softmax temperature must be > 0, got {tau}")));
        }
        if self.shape(m).len() != 2 {
            return Err(Error::shape("softmax_rows", format!("expected 2-D, got {:?}", self.shape(m))));
        }
        let c = self.shape(m)[1];
        let mut value = self.value(m).clone();
        for row in value.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = ((*v - mx) / tau).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(value, Op::Softmax { m, tau }, &[m]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "hadamard", |x, y| x * y, Op::Hadamard(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    // ---- structural --------------------------------------------------------

    /// Keeps the final `keep` steps of the time axis (`[.., T, C]`).
    pub fn slice_time(&mut self, x: Var, keep: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, t, c) = time_dims("slice_time", &sx)?;
        if keep > t {
            return Err(Error::shape("slice_time", format!("cannot keep {keep} of {t} steps")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * keep * c);
        for r in 0..rows {
            out.extend_from_slice(&xd[(r * t + t - keep) * c..(r + 1) * t * c]);
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = keep;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceTime { x, keep }, &[x]))
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match leading shape {:?}", s, lead),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let inputs = parts.to_vec();
        Ok(self.push(value, Op::Concat(inputs), parts))
    }

    // ---- specialised -------------------------------------------------------

    /// `(MᵀM + εI)⁻¹Mᵀ` for an `N×N′` matrix with `N ≥ N′`.
    pub fn regularized_pinv(&mut self, m: Var, eps: S) -> Result<Var> {
        if !(eps > S::zero()) {
            return Err(Error::Param(format!("pseudoinverse ridge must be > 0, got {eps}")));
        }
        let sm = self.shape(m).to_vec();
        if sm.len() != 2 || sm[0] < sm[1] || sm[1] == 0 {
            return Err(Error::shape(
                "regularized_pinv",
                format!("expected N×N′ with N ≥ N′ ≥ 1, got {sm:?}"),
            ));
        }
        let (n, k) = (sm[0], sm[1]);
        let md = self.value(m).data();
        let mut gram = vec![S::zero(); k * k];
        gemm_tn_acc(md, md, &mut gram, n, k, k);
        for i in 0..k {
            gram[i * k + i] += eps;
        }
        let chol = Cholesky::factor(&gram, k)?;
        let ratio = chol.pivot_ratio();
        if !ratio.is_finite() || ratio * S::epsilon() > S::one() {
            return Err(Error::Numerical(format!(
                "regularized normal matrix is numerically singular (pivot ratio {ratio}, ridge {eps})"
            )));
        }
        let inv_gram = chol.inverse();
        let mt = self.value(m).transpose2();
        let mut out = vec![S::zero(); k * n];
        gemm_acc(&inv_gram, mt.data(), &mut out, k, k, n);
        let value = Tensor::new([k, n], out)?;
        Ok(self.push(value, Op::Pinv { m, inv_gram }, &[m]))
    }

    /// Differentiable `D̃^{-1/2}(A + I)D̃^{-1/2}`.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let (value, inv_sqrt_deg) = sym_normalize_values(self.value(a))?;
        Ok(self.push(value, Op::SymNormalize { a, inv_sqrt_deg }, &[a]))
    }

    /// Per-channel normalization over all leading axes of `x` (`[.., C]`).
    ///
    /// In training mode batch statistics are used and returned; otherwise the
    /// supplied running statistics are applied.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[S], &[S]),
        training: bool,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} do not match channels of {sx:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let numel = self.value(x).numel();
        if c == 0 || numel == 0 {
            return Err(Error::shape("batchnorm", "zero batch"));
        }
        let rows = numel / c;
        let xd = self.value(x).data();
        let eps = S::of(BN_EPS);
        let (mean, var_biased, stats) = if training {
            let mut mean = vec![S::zero(); c];
            for row in xd.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let inv_rows = S::one() / S::of_usize(rows);
            mean.iter_mut().for_each(|m| *m *= inv_rows);
            let mut var = vec![S::zero(); c];
            for row in xd.chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let biased: Vec<S> = var.iter().map(|&s| s * inv_rows).collect();
            let unbiased_div = S::of_usize(rows.max(2) - 1);
            let unbiased = if rows > 1 {
                var.iter().map(|&s| s / unbiased_div).collect()
            } else {
                biased.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, biased, Some(stats))
        } else {
            if running.0.len() != c || running.1.len() != c {
                return Err(Error::shape("batchnorm", "running statistics length mismatch"));
            }
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let inv_std: Vec<S> = var_biased.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(numel);
        let mut out = Vec::with_capacity(numel);
        for row in xd.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Mean absolute error over entries where `mask` is true.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor<S>, mask: &[bool]) -> Result<Var> {
        same_shape("masked_mae", self.shape(pred), target.shape())?;
        if mask.len() != target.numel() {
            return Err(Error::shape("masked_mae", "mask length differs from target"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Param("masked_mae: every entry is masked".into()));
        }
        let pd = self.value(pred).data();
        let mut total = S::zero();
        for ((&p, &t), &m) in pd.iter().zip(target.data()).zip(mask) {
            if m {
                total += (p - t).abs();
            }
        }
        let value = Tensor::scalar(total / S::of_usize(count));
        let op = Op::MaskedMae {
            pred,
            target: target.data().to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(value, op, &[pred]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates gradients from the scalar `target` to every input that
    /// requires them.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.nodes[target.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("target must be scalar, got {:?}", self.shape(target)),
            ));
        }
        self.consumed = true;
        let Tape { nodes, grads, .. } = self;
        grads[target.0] = Some(vec![S::one()]);
        for i in (0..=target.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g)?;
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.numel()]))
}

fn backward_node<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    i: usize,
    g: &[S],
) -> Result<()> {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if let Some(da) = slot(grads, nodes, *a) {
                gemm_nt_acc(g, val(*b).data(), da, m, k, n);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm_tn_acc(val(*a).data(), g, db, m, k, n);
            }
        }
        Op::Linear { x, w } => {
            let (cin, cout) = (val(*w).rows(), val(*w).cols());
            let rows = val(*x).numel() / cin.max(1);
            if let Some(dx) = slot(grads, nodes, *x) {
                gemm_nt_acc(g, val(*w).data(), dx, rows, cin, cout);
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                gemm_tn_acc(val(*x).data(), g, dw, rows, cin, cout);
            }
        }
        Op::AddBias { x, b } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(S::one(), g, dx);
            }
            let c = val(*b).numel();
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g.chunks(c) {
                    axpy(S::one(), row, db);
                }
            }
        }
        Op::Conv1d { x, w, b, k } => {
            let k = *k;
            let (rows, t_in, cin) = time_dims("conv1d_time", val(*x).shape())?;
            let cout = val(*b).numel();
            let t_out = t_in - k + 1;
            if let Some(dx) = slot(grads, nodes, *x) {
                let wd = val(*w).data();
                for r in 0..rows {
                    let gr = &g[r * t_out * cout..(r + 1) * t_out * cout];
                    let dxs = &mut dx[r * t_in * cin..(r + 1) * t_in * cin];
                    gemm_nt_acc_strided(gr, wd, dxs, cin, t_out, k * cin, cout);
                }
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                let xd = val(*x).data();
                for r in 0..rows {
                    let gr = &g[r * t_out * cout..(r + 1) * t_out * cout];
                    let xs = &xd[r * t_in * cin..(r + 1) * t_in * cin];
                    gemm_tn_acc_strided(xs, cin, gr, dw, t_out, k * cin, cout);
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g.chunks(cout) {
                    axpy(S::one(), row, db);
                }
            }
        }
        Op::Glu { z, gate } => {
            if let Some(dz) = slot(grads, nodes, *z) {
                let zd = val(*z).data();
                let c2 = *val(*z).shape().last().unwrap();
                let c = c2 / 2;
                let rows = zd.chunks(c2).zip(dz.chunks_mut(c2)).zip(g.chunks(c)).zip(gate.chunks(c));
                for (((zrow, dzrow), grow), srow) in rows {
                    for j in 0..c {
                        let p = zrow[j];
                        let s = srow[j];
                        dzrow[j] += grow[j] * s;
                        dzrow[c + j] += grow[j] * p * s * (S::one() - s);
                    }
                }
            }
        }
        Op::Softmax { m, tau } => {
            if let Some(dm) = slot(grads, nodes, *m) {
                let c = out.cols();
                for ((yrow, grow), drow) in out.data().chunks(c).zip(g.chunks(c)).zip(dm.chunks_mut(c)) {
                    let inner = dot(yrow, grow);
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - inner) / *tau;
                    }
                }
            }
        }
        Op::Pinv { m, inv_gram } => {
            if let Some(dm) = slot(grads, nodes, *m) {
                let mv = val(*m);
                let (n, k) = (mv.rows(), mv.cols());
                // g is k×n. S̄ = g·M (k×k)
                let mut s_bar = vec![S::zero(); k * k];
                gemm_acc(g, mv.data(), &mut s_bar, k, n, k);
                // Ḡ = −S·S̄·S
                let mut tmp = vec![S::zero(); k * k];
                gemm_acc(inv_gram, &s_bar, &mut tmp, k, k, k);
                let mut g_bar = vec![S::zero(); k * k];
                gemm_acc(&tmp, inv_gram, &mut g_bar, k, k, k);
                let mut sym = vec![S::zero(); k * k];
                for r in 0..k {
                    for c in 0..k {
                        sym[r * k + c] = -(g_bar[r * k + c] + g_bar[c * k + r]);
                    }
                }
                // dM += gᵀ·S + M·(Ḡ + Ḡᵀ)
                let gt = Tensor::new([k, n], g.to_vec())?.transpose2();
                gemm_acc(gt.data(), inv_gram, dm, n, k, k);
                gemm_acc(mv.data(), &sym, dm, n, k, k);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let c = inv_std.len();
            let rows = xhat.len() / c;
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    sum_g[j] += grow[j];
                    sum_gx[j] += grow[j] * hrow[j];
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let gam = val(*gamma).data();
                let m = S::of_usize(rows);
                for ((grow, hrow), drow) in g.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)) {
                    for j in 0..c {
                        if *training {
                            drow[j] += gam[j] * inv_std[j] / m
                                * (m * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                        } else {
                            drow[j] += gam[j] * inv_std[j] * grow[j];
                        }
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gamma) {
                axpy(S::one(), &sum_gx, dg);
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                axpy(S::one(), &sum_g, db);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(S::one(), g, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(S::one(), g, db);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(S::one(), g, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(-S::one(), g, db);
            }
        }
        Op::Hadamard(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(vb) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(va) {
                    *d += gv * av;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                    if xv > S::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (S::one() - y);
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(*f, g, dx);
            }
        }
        Op::SliceTime { x, keep } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let (rows, t, c) = time_dims("slice_time", val(*x).shape())?;
                for r in 0..rows {
                    let src = &g[r * keep * c..(r + 1) * keep * c];
                    let dst = &mut dx[(r * t + t - keep) * c..(r + 1) * t * c];
                    axpy(S::one(), src, dst);
                }
            }
        }
        Op::Concat(parts) => {
            let widths: Vec<usize> = parts.iter().map(|p| *val(*p).shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                if let Some(dp) = slot(grads, nodes, *p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        axpy(S::one(), src, &mut dp[r * w..(r + 1) * w]);
                    }
                }
                offset += w;
            }
        }
        Op::GraphMix { p, x } => {
            let pv = val(*p);
            let (n_out, n_in) = (pv.rows(), pv.cols());
            let sx = val(*x).shape();
            let r = sx.len();
            let lead: usize = sx[..r - 3].iter().product();
            let block = sx[r - 2] * sx[r - 1];
            if let Some(dx) = slot(grads, nodes, *x) {
                for l in 0..lead {
                    let gl = &g[l * n_out * block..(l + 1) * n_out * block];
                    let dxl = &mut dx[l * n_in * block..(l + 1) * n_in * block];
                    gemm_tn_acc(pv.data(), gl, dxl, n_out, n_in, block);
                }
            }
            if let Some(dp) = slot(grads, nodes, *p) {
                let xd = val(*x).data();
                for l in 0..lead {
                    let gl = &g[l * n_out * block..(l + 1) * n_out * block];
                    let xl = &xd[l * n_in * block..(l + 1) * n_in * block];
                    gemm_nt_acc(gl, xl, dp, n_out, n_in, block);
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let (r, c) = (out.rows(), out.cols());
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(S::one(), g, da);
            }
        }
        Op::MeanAxis0(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let b = val(*a).shape()[0];
                let inv = S::one() / S::of_usize(b);
                for chunk in da.chunks_mut(g.len()) {
                    axpy(inv, g, chunk);
                }
            }
        }
        Op::SymNormalize { a, inv_sqrt_deg } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let av = val(*a);
                let n = av.rows();
                let s = inv_sqrt_deg;
                let tilde = |i: usize, j: usize| av.at2(i, j) + if i == j { S::one() } else { S::zero() };
                let mut s_bar = vec![S::zero(); n];
                for i in 0..n {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let t = tilde(i, j);
                        s_bar[i] += gij * t * s[j];
                        s_bar[j] += gij * s[i] * t;
                    }
                }
                let half = S::of(0.5);
                for i in 0..n {
                    let d_bar = -half * s_bar[i] * s[i] * s[i] * s[i];
                    for j in 0..n {
                        da[i * n + j] += g[i * n + j] * s[i] * s[j] + d_bar;
                    }
                }
            }
        }
        Op::MaskedMae {
            pred,
            target,
            mask,
            count,
        } => {
            if let Some(dp) = slot(grads, nodes, *pred) {
                let scale = g[0] / S::of_usize(*count);
                let pd = val(*pred).data();
                for (((d, &p), &t), &m) in dp.iter_mut().zip(pd).zip(target).zip(mask) {
                    if m && p != t {
                        *d += if p > t { scale } else { -scale };
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
    Ok(())
}
