//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its backward rule. [`Tape::backward`] walks the nodes in
//! reverse recording order, which is a valid reverse topological order
//! because inputs are always recorded before the operations that read them.
//!
//! Gradient policy: `backward` may be called any number of times on the same
//! tape. Each call recomputes gradients from scratch and overwrites the
//! stored gradient of every `requires_grad` leaf; intermediate gradients are
//! not retained.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;

use super::kernels::{self, gelu, gelu_grad};
use super::value::Tensor;

/// Floor applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait BackwardRule: Send + Sync {
    /// Returns one gradient per input (`None` where an input gets nothing).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
        temperature: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        layout: MatMulLayout,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

#[derive(Clone, Copy, Debug)]
struct MatMulLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_stride: usize,
    b_stride: usize,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Ordered record of operations; confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

/// Sums `g` (shaped like the larger operand) down to `small` elements by
/// folding the leading broadcast dimensions.
fn reduce_to_suffix(g: &[f64], small: usize) -> Vec<f64> {
    if g.len() == small {
        return g.to_vec();
    }
    let mut out = vec![0.0; small];
    for chunk in g.chunks(small) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A constant input; no gradient is produced for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient stored on a leaf by the most recent [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Ok(Tensor::from_parts(sa.to_vec(), data))
    }

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s (broadcast over
    /// the leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    // ----- normalisation -----------------------------------------------

    /// Normalises each row over the last axis to zero mean and unit variance
    /// (population variance, `eps` added inside the square root).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let w = *v.shape().last().ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        let rows = v.numel() / w.max(1);
        let mut out = vec![0.0; v.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (orow, src)) in out.chunks_mut(w).zip(v.data().chunks(w)).enumerate() {
            let mean = src.iter().sum::<f64>() / w as f64;
            let var = src.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &a) in orow.iter_mut().zip(src) {
                *o = (a - mean) * is;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::LayerNorm { x, inv_std }))
    }

    /// Scales each row over the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let w = *v.shape().last().ok_or_else(|| Error::Contract("l2_normalize on a scalar".into()))?;
        let mut out = vec![0.0; v.numel()];
        let mut norms = Vec::with_capacity(v.numel() / w.max(1));
        for (orow, src) in out.chunks_mut(w).zip(v.data().chunks(w)) {
            let n = src.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            for (o, &a) in orow.iter_mut().zip(src) {
                *o = a / n;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::L2Normalize { x, norms }))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Index {
                op: "sum_axis",
                index: axis,
                extent: v.rank(),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(Error::Index {
            op: "mean_axis",
            index: axis,
            extent: self.value(x).rank(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    // ----- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if i >= rank || j >= rank {
            return Err(Error::Index {
                op: "transpose",
                index: i.max(j),
                extent: rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                extent: base.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    fn rows_layout(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (outer, n, d) = axis_split(s, s.len() - 2);
        Ok((outer, n, d))
    }

    /// Selects rows along the second-to-last axis: `out[.., i, :] = x[.., idx[i], :]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (outer, n, d) = self.rows_layout("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * idx.len() * d);
        for o in 0..outer {
            for &i in idx {
                data.extend_from_slice(&src[(o * n + i) * d..(o * n + i + 1) * d]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Inverse of [`Tape::gather_rows`]: places row `i` of `x` at row
    /// `idx[i]` of an `n_out`-row output, zero elsewhere. Indices must be
    /// distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let (outer, n, d) = self.rows_layout("scatter_rows", x)?;
        if idx.len() != n {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut seen = vec![false; n_out];
        for &i in idx {
            if i >= n_out {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    extent: n_out,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!(
                    "scatter_rows index {i} repeated"
                )));
            }
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * n_out * d];
        for o in 0..outer {
            for (r, &i) in idx.iter().enumerate() {
                data[(o * n_out + i) * d..(o * n_out + i + 1) * d]
                    .copy_from_slice(&src[(o * n + r) * d..(o * n + r + 1) * d]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        let rk = shape.len();
        shape[rk - 2] = n_out;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ----- softmax -------------------------------------------------------

    /// `softmax(x / temperature)` along `axis`, computed with the row maximum
    /// subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                extent: v.rank(),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = ((src[at(l)] - max) / temperature).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::Softmax {
                x,
                axis,
                temperature,
            },
        ))
    }

    // ----- products --------------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch dimensions must
    /// match, or one side must be a plain matrix that is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (layout, batch_shape) = if ba == bb {
            let batch = ba.iter().product();
            (
                MatMulLayout {
                    batch,
                    m,
                    k,
                    n,
                    a_stride: m * k,
                    b_stride: k * n,
                },
                ba.to_vec(),
            )
        } else if bb.is_empty() {
            // fold a's batch into its rows: one large product
            let rows = ba.iter().product::<usize>() * m;
            (
                MatMulLayout {
                    batch: 1,
                    m: rows,
                    k,
                    n,
                    a_stride: 0,
                    b_stride: 0,
                },
                ba.to_vec(),
            )
        } else if ba.is_empty() {
            (
                MatMulLayout {
                    batch: bb.iter().product(),
                    m,
                    k,
                    n,
                    a_stride: 0,
                    b_stride: k * n,
                },
                bb.to_vec(),
            )
        } else {
            return Err(mismatch());
        };
        let data = kernels::matmul_nn(
            self.value(a).data(),
            layout.a_stride,
            self.value(b).data(),
            layout.b_stride,
            layout.batch,
            layout.m,
            layout.k,
            layout.n,
        );
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::MatMul { a, b, layout }))
    }

    /// Fractionally-strided 2-D convolution.
    ///
    /// `x: [B, C_in, h, w]`, `weight: [C_in, C_out, k, k]`, optional
    /// `bias: [C_out]`; output `[B, C_out, (h-1)·s + k, (w-1)·s + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be positive".into()));
        }
        let (b, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[1], sw[2]);
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return Err(Error::Dimension {
                    op: "conv_transpose2d bias",
                    lhs: vec![co],
                    rhs: self.shape(bv).to_vec(),
                });
            }
        }
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bias_v = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * co * oh * ow];
        for_each_chunk(&mut out, oh * ow, b * co * ci * h * w * k * k, |plane, dst| {
            let (bi, c_out) = (plane / co, plane % co);
            if let Some(bias) = bias_v {
                dst.iter_mut().for_each(|v| *v = bias[c_out]);
            }
            for c_in in 0..ci {
                let xs = &xv[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                let ker = &wv[(c_in * co + c_out) * k * k..(c_in * co + c_out + 1) * k * k];
                for i in 0..h {
                    for j in 0..w {
                        let xval = xs[i * w + j];
                        for ki in 0..k {
                            let row = (i * stride + ki) * ow + j * stride;
                            for kj in 0..k {
                                dst[row + kj] += xval * ker[ki * k + kj];
                            }
                        }
                    }
                }
            }
        });
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            Tensor::from_parts(vec![b, co, oh, ow], out),
            rg,
            Op::ConvTranspose2d {
                x,
                w: weight,
                bias,
                stride,
            },
        ))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    // ----- backward ------------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, gv: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(grads, v.0, gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, g.to_vec());
                if self.rg(*b) {
                    let mut gb = reduce_to_suffix(g, val(*b).len());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if self.rg(*a) {
                    send(*a, g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect());
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    send(*b, reduce_to_suffix(&prod, nb));
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|gi| gi * c).collect()),
            Op::Abs(a) => {
                let av = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else if x < 0.0 { -gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Log(a) => {
                let av = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > LOG_FLOOR { gi / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Gelu(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(gi, &x)| gi * gelu_grad(x)).collect());
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for (r, ((dst, gr), yr)) in dx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                send(*x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for (r, ((dst, gr), yr)) in dx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)).enumerate() {
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gi - yi * gy) / norms[r];
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        dx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = kernels::permute(g, node.value.shape(), &inv);
                send(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.shape()[*axis];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + len * inner]);
                        }
                        send(x, dx);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, d) = axis_split(shape, shape.len() - 2);
                let mut dx = vec![0.0; outer * n * d];
                for o in 0..outer {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[(o * idx.len() + r) * d..(o * idx.len() + r + 1) * d];
                        for (dst, s) in dx[(o * n + i) * d..(o * n + i + 1) * d].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::ScatterRows { x, idx } => {
                let shape = node.value.shape();
                let (outer, n_out, d) = axis_split(shape, shape.len() - 2);
                let mut dx = Vec::with_capacity(outer * idx.len() * d);
                for o in 0..outer {
                    for &i in idx {
                        dx.extend_from_slice(&g[(o * n_out + i) * d..(o * n_out + i + 1) * d]);
                    }
                }
                send(*x, dx);
            }
            Op::Softmax { x, axis, temperature } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dotp: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = out[at(l)] * (g[at(l)] - dotp) / temperature;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MatMul { a, b, layout } => {
                let MatMulLayout {
                    batch,
                    m,
                    k,
                    n,
                    a_stride,
                    b_stride,
                } = *layout;
                if self.rg(*a) {
                    let da = kernels::matmul_nt(g, m * n, val(*b), b_stride, batch, m, n, k);
                    let da = if a_stride == 0 && batch > 1 {
                        reduce_to_suffix(&da, m * k)
                    } else {
                        da
                    };
                    send(*a, da);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(
                        val(*a),
                        a_stride,
                        g,
                        m * n,
                        batch,
                        k,
                        m,
                        n,
                        b_stride == 0 && batch > 1,
                    );
                    send(*b, db);
                }
            }
            Op::ConvTranspose2d { x, w, bias, stride } => {
                let s = *stride;
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, k) = (sw[1], sw[2]);
                let (oh, ow) = ((h - 1) * s + k, (wd - 1) * s + k);
                let (xv, wv) = (val(*x), val(*w));
                let work = b * co * ci * h * wd * k * k;
                if self.rg(*x) {
                    let mut dx = vec![0.0; b * ci * h * wd];
                    for_each_chunk(&mut dx, h * wd, work, |plane, dst| {
                        let (bi, c_in) = (plane / ci, plane % ci);
                        for c_out in 0..co {
                            let gp = &g[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                            let ker = &wv[(c_in * co + c_out) * k * k..(c_in * co + c_out + 1) * k * k];
                            for i in 0..h {
                                for j in 0..wd {
                                    let mut acc = 0.0;
                                    for ki in 0..k {
                                        let row = (i * s + ki) * ow + j * s;
                                        for kj in 0..k {
                                            acc += gp[row + kj] * ker[ki * k + kj];
                                        }
                                    }
                                    dst[i * wd + j] += acc;
                                }
                            }
                        }
                    });
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; ci * co * k * k];
                    for_each_chunk(&mut dw, k * k, work, |pair, dst| {
                        let (c_in, c_out) = (pair / co, pair % co);
                        for bi in 0..b {
                            let xs = &xv[(bi * ci + c_in) * h * wd..(bi * ci + c_in + 1) * h * wd];
                            let gp = &g[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                            for i in 0..h {
                                for j in 0..wd {
                                    let xval = xs[i * wd + j];
                                    for ki in 0..k {
                                        let row = (i * s + ki) * ow + j * s;
                                        for kj in 0..k {
                                            dst[ki * k + kj] += xval * gp[row + kj];
                                        }
                                    }
                                }
                            }
                        }
                    });
                    send(*w, dw);
                }
                if let Some(bv) = bias {
                    if self.rg(*bv) {
                        let mut db = vec![0.0; co];
                        for (plane, chunk) in g.chunks(oh * ow).enumerate() {
                            db[plane % co] += chunk.iter().sum::<f64>();
                        }
                        send(*bv, db);
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let outs = rule.backward(&ins, &node.value, &gt)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom backward returned {} gradients for {} inputs",
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        if gi.numel() != self.nodes[v.0].value.numel() {
                            return Err(Error::Dimension {
                                op: "custom backward",
                                lhs: self.nodes[v.0].value.shape().to_vec(),
                                rhs: gi.shape().to_vec(),
                            });
                        }
                        send(v, gi.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}
