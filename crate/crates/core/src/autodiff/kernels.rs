//! Plain numeric kernels shared by the tape's forward and backward passes.

use crate::tensor::{strides, Tensor};

/// Right-aligned broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                s[i - pad]
            }
        })
        .collect()
}

/// Visit every output position with the matching offsets into two broadcast inputs.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum a broadcast gradient back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(out, &s, &zeros, |i, o, _| acc[o] += g[i]);
    Tensor::from_parts(shape.to_vec(), acc)
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn flops(&self) -> u64 {
        2 * (self.batch * self.cout * self.out_h() * self.out_w() * (self.cin / self.groups) * self.kh * self.kw)
            as u64
    }

    /// Calls `f(x_offset, w_offset, y_offset)` for every multiply-accumulate.
    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for b in 0..self.batch {
            for oc in 0..self.cout {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let xbase = (b * self.cin + ic) * self.h * self.w;
                    let ybase = (b * self.cout + oc) * ho * wo;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let woff = ((oc * cin_g + icg) * self.kh + ky) * self.kw + kx;
                            for oy in 0..ho {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * self.w;
                                let yrow = ybase + oy * wo;
                                for ox in 0..wo {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    f(xrow + ix as usize, woff, yrow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.batch * self.cout * self.out_h() * self.out_w()];
        self.visit(|xi, wi, yi| y[yi] += x[xi] * w[wi]);
        y
    }

    pub fn backward_input(&self, dy: &[f64], w: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.batch * self.cin * self.h * self.w];
        self.visit(|xi, wi, yi| dx[xi] += dy[yi] * w[wi]);
        dx
    }

    pub fn backward_weight(&self, dy: &[f64], x: &[f64]) -> Vec<f64> {
        let mut dw = vec![0.0; self.cout * (self.cin / self.groups) * self.kh * self.kw];
        self.visit(|xi, wi, yi| dw[wi] += dy[yi] * x[xi]);
        dw
    }
}

/// Split a shape around `axis` into `(outer, extent, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - m).exp();
                y[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                y[base + j * inner] /= s;
            }
        }
    }
    y
}

pub fn log_softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                s += (x[base + j * inner] - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..n {
                y[base + j * inner] = x[base + j * inner] - lse;
            }
        }
    }
    y
}

/// Element grouping shared by layer and batch normalization.
#[derive(Debug, Clone, Copy)]
pub enum NormLayout {
    /// Normalize contiguous rows of length `n` (layer norm over the last axis).
    Rows { rows: usize, n: usize },
    /// Normalize per channel of a `[B, C, S]` block (batch norm).
    Channels { batch: usize, channels: usize, spatial: usize },
}

impl NormLayout {
    pub fn groups(&self) -> usize {
        match *self {
            NormLayout::Rows { rows, .. } => rows,
            NormLayout::Channels { channels, .. } => channels,
        }
    }

    pub fn group_len(&self) -> usize {
        match *self {
            NormLayout::Rows { n, .. } => n,
            NormLayout::Channels { batch, spatial, .. } => batch * spatial,
        }
    }

    /// Calls `f(group, flat_index, affine_slot)` for every element.
    pub fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            NormLayout::Rows { rows, n } => {
                for r in 0..rows {
                    for j in 0..n {
                        f(r, r * n + j, j);
                    }
                }
            }
            NormLayout::Channels {
                batch,
                channels,
                spatial,
            } => {
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            f(c, base + s, c);
                        }
                    }
                }
            }
        }
    }

    /// Per-group mean and biased variance.
    pub fn stats(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.groups();
        let n = self.group_len() as f64;
        let mut mean = vec![0.0; g];
        self.visit(|gi, i, _| mean[gi] += x[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; g];
        self.visit(|gi, i, _| {
            let d = x[i] - mean[gi];
            var[gi] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
