//! Dynamic tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, appends a node to the [`Tape`] and
//! returns a [`Var`] handle. [`Tape::backward`] consumes the tape, walks the
//! nodes in reverse and returns the vector-Jacobian products for every node
//! that depends on a differentiable leaf.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::{axis_split, ConvGeom, NormLayout};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * kernels::sigmoid(x),
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => kernels::sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = kernels::sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Act(Var, Activation),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        /// Statistics came from the input itself (so they carry gradient).
        batch_stats: bool,
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
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Result of a batch-normalization step: output plus the batch statistics
/// (mean and unbiased variance per channel) used for running averages.
#[derive(Debug)]
pub struct BatchNormOut {
    pub y: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
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

    /// Floating-point operations counted so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var], flops: u64) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.flops += flops;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), d)
        } else {
            let os = kernels::broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
            let sa = kernels::broadcast_strides(ta.shape(), &os);
            let sb = kernels::broadcast_strides(tb.shape(), &os);
            let mut d = vec![0.0; numel(&os)];
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&os, &sa, &sb, |i, oa, ob| d[i] = f(da[oa], db[ob]));
            Tensor::from_parts(os, d)
        };
        let n = out.numel() as u64;
        self.push(name, out, Op::Binary(kind, a, b), &[a, b], n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let n = out.numel() as u64;
        self.push("scale", out, Op::Scale(x, s), &[x], n)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let n = out.numel() as u64;
        self.push("add_scalar", out, Op::AddScalar(x), &[x], n)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let plan = MatmulPlan::new(sa, sb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        let (da, db) = (ta.data(), tb.data());
        plan.visit(|ia, ib, ic| {
            kernels::gemm_nn(
                &da[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &db[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                &mut out[ic * plan.m * plan.n..(ic + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            )
        });
        let fl = 2 * (plan.batch * plan.m * plan.k * plan.n) as u64;
        let t = Tensor::from_parts(plan.out_shape.clone(), out);
        self.push("matmul", t, Op::MatMul(a, b), &[a, b], fl)
    }

    /// 2-D convolution over `[B, Cin, H, W]` with weights `[Cout, Cin/g, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if groups == 0 || sx[1] % groups != 0 || sw[0] % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("{} input / {} output channels not divisible into {groups} groups", sx[1], sw[0]),
            ));
        }
        if sw[1] != sx[1] / groups {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if sw[2] > sx[2] + 2 * pad || sw[3] > sx[3] + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {}x{} larger than padded input {:?} (pad {pad})", sw[2], sw[3], sx),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            groups,
        };
        let y = geom.forward(tx.data(), tw.data());
        let t = Tensor::from_parts(vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()], y);
        self.push("conv2d", t, Op::Conv2d { x, w, geom }, &[x, w], geom.flops())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", axis, t.rank())?;
        let (o, n, i) = axis_split(t.shape(), axis);
        let y = Tensor::from_parts(t.shape().to_vec(), kernels::softmax(t.data(), o, n, i));
        let fl = 4 * y.numel() as u64;
        self.push("softmax", y, Op::Softmax { x, axis }, &[x], fl)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("log_softmax", axis, t.rank())?;
        let (o, n, i) = axis_split(t.shape(), axis);
        let y = Tensor::from_parts(t.shape().to_vec(), kernels::log_softmax(t.data(), o, n, i));
        let fl = 4 * y.numel() as u64;
        self.push("log_softmax", y, Op::LogSoftmax { x, axis }, &[x], fl)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.value(x).map(|v| kind.apply(v));
        let fl = 4 * y.numel() as u64;
        self.push("activation", y, Op::Act(x, kind), &[x], fl)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// that axis' extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let layout = NormLayout::Rows {
            rows: numel(&s) / c,
            n: c,
        };
        let (mean, var) = layout.stats(self.value(x).data());
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let y = self.normalize(x, gamma, beta, layout, &mean, rstd, true, "layer_norm")?;
        Ok(y)
    }

    /// Batch normalization over `[B, C, ...]` per channel. With `running`
    /// statistics the op normalizes by them (evaluation); otherwise by the
    /// batch statistics, which are returned for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<BatchNormOut> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let layout = NormLayout::Channels {
            batch: s[0],
            channels: s[1],
            spatial: s[2..].iter().product(),
        };
        let m = layout.group_len();
        match running {
            Some((rm, rv)) => {
                if rm.len() != s[1] || rv.len() != s[1] {
                    return Err(Error::invalid("batch_norm", "running statistics length mismatch"));
                }
                let rstd: Vec<f64> = rv.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let y = self.normalize(x, gamma, beta, layout, rm, rstd, false, "batch_norm")?;
                Ok(BatchNormOut {
                    y,
                    mean: rm.to_vec(),
                    var: rv.to_vec(),
                })
            }
            None => {
                let (mean, var) = layout.stats(self.value(x).data());
                let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let y = self.normalize(x, gamma, beta, layout, &mean, rstd, true, "batch_norm")?;
                let unbiased = if m > 1 {
                    var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
                } else {
                    var
                };
                Ok(BatchNormOut {
                    y,
                    mean,
                    var: unbiased,
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        mean: &[f64],
        rstd: Vec<f64>,
        batch_stats: bool,
        name: &'static str,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = tx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        layout.visit(|gi, i, p| {
            let h = (xd[i] - mean[gi]) * rstd[gi];
            xhat[i] = h;
            y[i] = h * g[p] + b[p];
        });
        let t = Tensor::from_parts(tx.shape().to_vec(), y);
        let fl = 8 * t.numel() as u64;
        self.push(
            name,
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                rstd,
                batch_stats,
            },
            &[x, gamma, beta],
            fl,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x], 0)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        self.push(
            "permute",
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
            0,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; numel(&shape)];
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            let n = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * n * inner..(o + 1) * n * inner];
                let dst = o * total * inner + off * inner;
                out[dst..dst + n * inner].copy_from_slice(src);
            }
            off += n;
        }
        let t = Tensor::from_parts(shape, out);
        self.push(
            "concat",
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
            0,
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("slice", axis, s.len())?;
        if len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside extent {} of {s:?}", start + len, s[axis]),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = o * n * inner + start * inner;
            out.extend_from_slice(&d[b..b + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::from_parts(shape, out);
        self.push("slice", t, Op::Slice { x, axis, start }, &[x], 0)
    }

    /// Split along `axis` into consecutive parts of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lengths: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x);
        check_axis("split", axis, s.len())?;
        if lengths.iter().sum::<usize>() != s[axis] {
            return Err(Error::invalid(
                "split",
                format!("lengths {lengths:?} do not cover extent {} of {s:?}", s[axis]),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(lengths.len());
        for &l in lengths {
            parts.push(self.slice(x, axis, start, l)?);
            start += l;
        }
        Ok(parts)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("sum_axis", axis, t.rank())?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let fl = t.numel() as u64;
        let t = Tensor::from_parts(shape, out);
        self.push("sum_axis", t, Op::SumAxis { x, axis }, &[x], fl)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = {
            let s = self.shape(x);
            check_axis("mean_axis", axis, s.len())?;
            s[axis]
        };
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let fl = t.numel() as u64;
        let v = Tensor::scalar(t.sum());
        self.push("sum", v, Op::SumAll(x), &[x], fl)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sub-pixel rearrangement `[B, f²·C, H, W] → [B, C, f·H, f·W]`.
    pub fn upsample_rearrange(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 || s[1] % (factor * factor) != 0 {
            return Err(Error::invalid(
                "upsample_rearrange",
                format!("cannot rearrange {s:?} by factor {factor}"),
            ));
        }
        let (b, c, h, w) = (s[0], s[1] / (factor * factor), s[2], s[3]);
        let r = self.reshape(x, &[b, c, factor, factor, h, w])?;
        let p = self.permute(r, &[0, 1, 4, 2, 5, 3])?;
        self.reshape(p, &[b, c, h * factor, w * factor])
    }

    /// Gradient of `loss` with respect to every recorded node.
    ///
    /// Consumes the tape: a recording supports exactly one backward pass.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes, .. } = self;
        let ls = nodes[loss.0].value.shape();
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Index mapping for broadcast batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    out_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = kernels::broadcast_shape(ba, bb)?;
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Some(Self {
            m,
            k,
            n,
            batch: numel(&batch_shape),
            sa: kernels::broadcast_strides(ba, &batch_shape),
            sb: kernels::broadcast_strides(bb, &batch_shape),
            out_shape,
            batch_shape,
        })
    }

    /// Calls `f(a_matrix, b_matrix, out_matrix)` for each output batch entry.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.batch_shape.is_empty() {
            f(0, 0, 0);
            return;
        }
        kernels::for_each_broadcast(&self.batch_shape, &self.sa, &self.sb, |ic, ia, ib| f(ia, ib, ic));
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let same = ta.shape() == tb.shape() && ta.shape() == g.shape();
            let os = g.shape();
            let sa = kernels::broadcast_strides(ta.shape(), os);
            let sb = kernels::broadcast_strides(tb.shape(), os);
            let (da, db, dg) = (ta.data(), tb.data(), g.data());
            let mut ga = rg(*a).then(|| vec![0.0; ta.numel()]);
            let mut gb = rg(*b).then(|| vec![0.0; tb.numel()]);
            let mut step = |i: usize, oa: usize, ob: usize| {
                let (pa, pb) = match kind {
                    Binary::Add => (dg[i], dg[i]),
                    Binary::Sub => (dg[i], -dg[i]),
                    Binary::Mul => (dg[i] * db[ob], dg[i] * da[oa]),
                    Binary::Div => (dg[i] / db[ob], -dg[i] * da[oa] / (db[ob] * db[ob])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[oa] += pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ob] += pb;
                }
            };
            if same {
                for i in 0..dg.len() {
                    step(i, i, i);
                }
            } else {
                kernels::for_each_broadcast(os, &sa, &sb, step);
            }
            if let Some(ga) = ga {
                accumulate(grads, nodes, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
        }
        Op::Scale(x, s) => accumulate(grads, nodes, *x, g.map(|v| v * s)),
        Op::AddScalar(x) => accumulate(grads, nodes, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let (da, db, dg) = (ta.data(), tb.data(), g.data());
            let mut ga = rg(*a).then(|| vec![0.0; ta.numel()]);
            let mut gb = rg(*b).then(|| vec![0.0; tb.numel()]);
            plan.visit(|ia, ib, ic| {
                let gc = &dg[ic * m * n..(ic + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    kernels::gemm_nt(gc, &db[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, n, k);
                }
                if let Some(gb) = gb.as_mut() {
                    kernels::gemm_tn(&da[ia * m * k..(ia + 1) * m * k], gc, &mut gb[ib * k * n..(ib + 1) * k * n], k, m, n);
                }
            });
            if let Some(ga) = ga {
                accumulate(grads, nodes, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
        }
        Op::Conv2d { x, w, geom } => {
            if rg(*x) {
                let dx = geom.backward_input(g.data(), val(*w).data());
                accumulate(grads, nodes, *x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
            }
            if rg(*w) {
                let dw = geom.backward_weight(g.data(), val(*x).data());
                accumulate(grads, nodes, *w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[base + j * inner] * yd[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        dx[p] = yd[p] * (gd[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(y.shape().to_vec(), dx));
        }
        Op::LogSoftmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let s: f64 = (0..n).map(|j| gd[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        dx[p] = gd[p] - yd[p].exp() * s;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(y.shape().to_vec(), dx));
        }
        Op::Act(x, kind) => {
            let (xd, yd, gd) = (val(*x).data(), node.value.data(), g.data());
            let dx = (0..xd.len()).map(|i| gd[i] * kind.derivative(xd[i], yd[i])).collect();
            accumulate(grads, nodes, *x, Tensor::from_parts(node.value.shape().to_vec(), dx));
        }
        Op::Norm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            rstd,
            batch_stats,
        } => {
            let gam = val(*gamma).data();
            let gd = g.data();
            let groups = layout.groups();
            let m = layout.group_len() as f64;
            let np = gam.len();
            let mut dgamma = vec![0.0; np];
            let mut dbeta = vec![0.0; np];
            let mut sum_dh = vec![0.0; groups];
            let mut sum_dh_h = vec![0.0; groups];
            layout.visit(|gi, i, p| {
                dgamma[p] += gd[i] * xhat[i];
                dbeta[p] += gd[i];
                let dh = gd[i] * gam[p];
                sum_dh[gi] += dh;
                sum_dh_h[gi] += dh * xhat[i];
            });
            if rg(*x) {
                let mut dx = vec![0.0; gd.len()];
                layout.visit(|gi, i, p| {
                    let dh = gd[i] * gam[p];
                    dx[i] = if *batch_stats {
                        rstd[gi] * (dh - sum_dh[gi] / m - xhat[i] * sum_dh_h[gi] / m)
                    } else {
                        rstd[gi] * dh
                    };
                });
                accumulate(grads, nodes, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            accumulate(grads, nodes, *gamma, Tensor::from_parts(vec![np], dgamma));
            accumulate(grads, nodes, *beta, Tensor::from_parts(vec![np], dbeta));
        }
        Op::Reshape(x) => {
            let gx = Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec());
            accumulate(grads, nodes, *x, gx);
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *x, g.permute(&inv).expect("valid inverse permutation"));
        }
        Op::Concat { xs, axis } => {
            let shape = g.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut off = 0;
            for &v in xs {
                let s = val(v).shape();
                let n = s[*axis];
                if rg(v) {
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let b = o * total * inner + off * inner;
                        part.extend_from_slice(&g.data()[b..b + n * inner]);
                    }
                    accumulate(grads, nodes, v, Tensor::from_parts(s.to_vec(), part));
                }
                off += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let s = val(*x).shape();
            let (outer, n, inner) = axis_split(s, *axis);
            let len = g.shape()[*axis];
            let mut dx = vec![0.0; numel(s)];
            for o in 0..outer {
                let b = o * n * inner + start * inner;
                dx[b..b + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(s.to_vec(), dx));
        }
        Op::SumAxis { x, axis } => {
            let s = val(*x).shape();
            let (outer, n, inner) = axis_split(s, *axis);
            let mut dx = vec![0.0; numel(s)];
            for o in 0..outer {
                for j in 0..n {
                    dx[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(s.to_vec(), dx));
        }
        Op::SumAll(x) => {
            let s = val(*x).shape();
            accumulate(grads, nodes, *x, Tensor::full(s, g.item()));
        }
    }
}

#[cfg(test)]
mod tests;
