use crate::autodiff::{Activation, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{BufferId, Ctx, Init, Mode, ParamId};

pub const AFFINE_INIT_STD: f64 = 0.02;

/// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        init.scope(name, |i| Self {
            w: i.trunc_normal("w", &[in_dim, out_dim], AFFINE_INIT_STD),
            b: Some(i.zeros("b", &[out_dim])),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        init.scope(name, |i| Self {
            w: i.trunc_normal("w", &[in_dim, out_dim], AFFINE_INIT_STD),
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let y = cx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                cx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution with optional per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub cout: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, 1, kernel / 2)
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::new(cin, cout, 1, 1, 0)
    }
}

impl Conv2d {
    pub fn new(init: &mut Init<'_>, name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        // He-style fan-out initialization.
        let fan_out = (k * k * spec.cout / spec.groups).max(1);
        let std = (2.0 / fan_out as f64).sqrt();
        init.scope(name, |i| Self {
            w: i.normal("w", &[spec.cout, spec.cin / spec.groups, k, k], std),
            b: spec.bias.then(|| i.zeros("b", &[spec.cout])),
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
            cout: spec.cout,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let y = cx.tape.conv2d(x, w, self.stride, self.pad, self.groups)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                let b = cx.tape.reshape(b, &[self.cout, 1, 1])?;
                cx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.ones("gamma", &[dim]),
            beta: i.zeros("beta", &[dim]),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.tape.layer_norm(x, g, b)
    }

    /// Normalize the channel axis of a `[B, C, H, W]` map.
    pub fn forward_map(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = cx.tape.permute(x, &[0, 2, 3, 1])?;
        let n = self.forward(cx, p)?;
        cx.tape.permute(n, &[0, 3, 1, 2])
    }
}

/// Batch normalization over `[B, C, ...]` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.ones("gamma", &[channels]),
            beta: i.zeros("beta", &[channels]),
            running_mean: i.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: i.buffer("running_var", Tensor::ones(&[channels])),
            momentum: 0.1,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        match cx.mode() {
            Mode::Eval => {
                let rm = cx.buffer(self.running_mean).data().to_vec();
                let rv = cx.buffer(self.running_var).data().to_vec();
                Ok(cx.tape.batch_norm(x, g, b, Some((&rm, &rv)))?.y)
            }
            Mode::Train => {
                let out = cx.tape.batch_norm(x, g, b, None)?;
                let m = self.momentum;
                let blend = |old: &Tensor, new: &[f64]| {
                    Tensor::from_fn(old.shape(), |i| (1.0 - m) * old.data()[i] + m * new[i])
                };
                let rm = blend(cx.buffer(self.running_mean), &out.mean);
                let rv = blend(cx.buffer(self.running_var), &out.var);
                cx.record_stat(self.running_mean, rm);
                cx.record_stat(self.running_var, rv);
                Ok(out.y)
            }
        }
    }
}

/// Position-wise feed-forward: `Linear(d → 4d) → GELU → Linear(4d → d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const FFN_EXPANSION: usize = 4;

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            fc1: Linear::new(i, "fc1", dim, dim * FFN_EXPANSION),
            fc2: Linear::new(i, "fc2", dim * FFN_EXPANSION, dim),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.activation(h, Activation::Gelu)?;
        self.fc2.forward(cx, h)
    }
}

/// `[B, C, H, W]` map to `[B, H·W, C]` tokens.
pub fn map_to_tokens(cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = cx.shape(x);
    if s.len() != 4 {
        return Err(Error::invalid("map_to_tokens", format!("expected rank 4, got {s:?}")));
    }
    let p = cx.tape.permute(x, &[0, 2, 3, 1])?;
    cx.tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C]` tokens back to a `[B, C, H, W]` map.
pub fn tokens_to_map(cx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = cx.shape(x);
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::invalid(
            "tokens_to_map",
            format!("{s:?} is not a token sequence for a {h}x{w} grid"),
        ));
    }
    let r = cx.tape.reshape(x, &[s[0], h, w, s[2]])?;
    cx.tape.permute(r, &[0, 3, 1, 2])
}
