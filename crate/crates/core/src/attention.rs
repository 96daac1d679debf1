//! Attention mechanisms and convolutional position encodings.
//!
//! * [`FactorizedAttention`]: softmax over keys only, `ρ_q(Q)·(ρ_k(K)ᵀ·V)`
//!   with `ρ_q(Q) = Q/√N`, optionally extended by [`ConvRelPosEnc`].
//! * [`TokenAwareAttention`]: dot-product attention whose keys and values
//!   are spatially reduced by a ratio `r` (fold `r` tokens into channels,
//!   then project back to the model depth).
//! * [`ChannelAwareAttention`]: efficient attention forming a `d_k × d_v`
//!   channel matrix, linear in the token count.
//! * [`EfficientTransformerBlock`]: position encoding, factorized attention
//!   and a feed-forward network with pre-norm residuals.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    map_to_tokens, tokens_to_map, Conv2d, ConvSpec, Ctx, FeedForward, Init, LayerNorm, Linear, ParamStore,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape-level description of an attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub reduction: usize,
}

impl AttentionParams {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            d_k: d_model,
            d_v: d_model,
            reduction: 1,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    /// Key depth `d/2`, value depth `d`.
    pub fn channel_aware(d_model: usize) -> Self {
        Self {
            d_k: d_model / 2,
            ..Self::new(d_model, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model depth {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_k == 0 || self.d_k % self.heads != 0 || self.d_v == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "key/value depths {}/{} not divisible by {} heads",
                self.d_k, self.d_v, self.heads
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// `[B, N, heads·d] → [B, heads, N, d]`.
fn split_heads(cx: &mut Ctx<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = cx.shape(x);
    let r = cx.tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    cx.tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, heads, N, d] → [B, N, heads·d]`.
fn merge_heads(cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = cx.shape(x);
    let p = cx.tape.permute(x, &[0, 2, 1, 3])?;
    cx.tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

fn check_tokens(op: &'static str, shape: &[usize], dim: usize) -> Result<()> {
    if shape.len() != 3 || shape[2] != dim {
        return Err(Error::invalid(op, format!("expected [B, N, {dim}] tokens, got {shape:?}")));
    }
    Ok(())
}

fn check_grid(op: &'static str, n: usize, hw: (usize, usize)) -> Result<()> {
    if n != hw.0 * hw.1 {
        return Err(Error::invalid(
            op,
            format!("{n} tokens do not form a {}x{} grid", hw.0, hw.1),
        ));
    }
    Ok(())
}

/// Depthwise 3×3 convolution over the token grid, added back to the input.
#[derive(Debug, Clone)]
pub struct ConvPosEnc {
    pub conv: Conv2d,
}

impl ConvPosEnc {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            conv: Conv2d::new(init, name, ConvSpec::depthwise(dim, 3)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, hw: (usize, usize)) -> Result<Var> {
        let s = cx.shape(x);
        check_tokens("conv_position_encoding", &s, self.conv.cout)?;
        check_grid("conv_position_encoding", s[1], hw)?;
        let m = tokens_to_map(cx, x, hw.0, hw.1)?;
        let c = self.conv.forward(cx, m)?;
        let t = map_to_tokens(cx, c)?;
        cx.tape.add(x, t)
    }
}

/// `Q ⊙ DWConv₃ₓ₃(V)` with V laid out on the token grid, per head.
#[derive(Debug, Clone)]
pub struct ConvRelPosEnc {
    pub conv: Conv2d,
}

impl ConvRelPosEnc {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            conv: Conv2d::new(init, name, ConvSpec::depthwise(dim, 3)),
        }
    }

    /// `q`, `v`: `[B, heads, N, d]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, q: Var, v: Var, hw: (usize, usize)) -> Result<Var> {
        let s = cx.shape(v);
        if s.len() != 4 || cx.shape(q) != s || s[1] * s[3] != self.conv.cout {
            return Err(Error::invalid(
                "conv_relative_position_encoding",
                format!("q {:?} / v {s:?} do not match depth {}", cx.shape(q), self.conv.cout),
            ));
        }
        check_grid("conv_relative_position_encoding", s[2], hw)?;
        let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
        let p = cx.tape.permute(v, &[0, 1, 3, 2])?;
        let m = cx.tape.reshape(p, &[b, h * d, hw.0, hw.1])?;
        let c = self.conv.forward(cx, m)?;
        let r = cx.tape.reshape(c, &[b, h, d, n])?;
        let back = cx.tape.permute(r, &[0, 1, 3, 2])?;
        cx.tape.mul(q, back)
    }
}

/// Factorized attention with optional convolutional relative position encoding.
#[derive(Debug, Clone)]
pub struct FactorizedAttention {
    pub params: AttentionParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub crpe: Option<ConvRelPosEnc>,
}

impl FactorizedAttention {
    pub fn new(init: &mut Init<'_>, name: &str, params: AttentionParams, crpe: bool) -> Result<Self> {
        params.validate()?;
        let d = params.d_model;
        Ok(init.scope(name, |i| Self {
            params,
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            proj: Linear::new(i, "proj", d, d),
            crpe: crpe.then(|| ConvRelPosEnc::new(i, "crpe", d)),
        }))
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, hw: (usize, usize)) -> Result<Var> {
        let s = cx.shape(x);
        check_tokens("factorized_attention", &s, self.params.d_model)?;
        let n = s[1];
        let heads = self.params.heads;
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let (q, k, v) = (
            split_heads(cx, q, heads)?,
            split_heads(cx, k, heads)?,
            split_heads(cx, v, heads)?,
        );
        let k_soft = cx.tape.softmax(k, 2)?;
        let kt = cx.tape.transpose(k_soft)?;
        let context = cx.tape.matmul(kt, v)?;
        let q_scaled = cx.tape.scale(q, 1.0 / (n as f64).sqrt())?;
        let mut out = cx.tape.matmul(q_scaled, context)?;
        if let Some(crpe) = &self.crpe {
            check_grid("factorized_attention", n, hw)?;
            let enc = crpe.forward(cx, q, v, hw)?;
            out = cx.tape.add(out, enc)?;
        }
        let merged = merge_heads(cx, out)?;
        self.proj.forward(cx, merged)
    }
}

/// Dot-product attention with spatially reduced keys and values.
#[derive(Debug, Clone)]
pub struct TokenAwareAttention {
    pub params: AttentionParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// `r·C → C` projections; absent when `r = 1`.
    pub reduce_k: Option<Linear>,
    pub reduce_v: Option<Linear>,
    pub proj: Linear,
}

impl TokenAwareAttention {
    pub fn new(init: &mut Init<'_>, name: &str, params: AttentionParams) -> Result<Self> {
        params.validate()?;
        let (d, r) = (params.d_model, params.reduction);
        Ok(init.scope(name, |i| Self {
            params,
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            reduce_k: (r > 1).then(|| Linear::new(i, "reduce_k", r * d, d)),
            reduce_v: (r > 1).then(|| Linear::new(i, "reduce_v", r * d, d)),
            proj: Linear::new(i, "proj", d, d),
        }))
    }

    fn reduce(&self, cx: &mut Ctx<'_>, t: Var, proj: &Option<Linear>) -> Result<Var> {
        match proj {
            None => Ok(t),
            Some(p) => {
                let s = cx.shape(t);
                let r = self.params.reduction;
                let folded = cx.tape.reshape(t, &[s[0], s[1] / r, r * s[2]])?;
                p.forward(cx, folded)
            }
        }
    }

    /// Output and the `[B, heads, N, N/r]` attention matrix.
    pub fn forward_with_weights(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let s = cx.shape(x);
        check_tokens("token_aware_attention", &s, self.params.d_model)?;
        let r = self.params.reduction;
        if s[1] % r != 0 {
            return Err(Error::invalid(
                "token_aware_attention",
                format!("{} tokens not divisible by reduction ratio {r}", s[1]),
            ));
        }
        let heads = self.params.heads;
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let k = self.reduce(cx, k, &self.reduce_k)?;
        let v = self.reduce(cx, v, &self.reduce_v)?;
        let (q, k, v) = (
            split_heads(cx, q, heads)?,
            split_heads(cx, k, heads)?,
            split_heads(cx, v, heads)?,
        );
        let dk = self.params.d_model / heads;
        let kt = cx.tape.transpose(k)?;
        let scores = cx.tape.matmul(q, kt)?;
        let scores = cx.tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let attn = cx.tape.softmax(scores, 3)?;
        let out = cx.tape.matmul(attn, v)?;
        let merged = merge_heads(cx, out)?;
        Ok((self.proj.forward(cx, merged)?, attn))
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }
}

/// Efficient (channel-aware) attention.
#[derive(Debug, Clone)]
pub struct ChannelAwareAttention {
    pub params: AttentionParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

/// Intermediate tensors of channel-aware attention, exposed for verification.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionParts {
    /// `Softmax_row(Q/√N)`: `[B, heads, N, d_k/h]`.
    pub rho_q: Var,
    /// `Softmax_col(K/√N)`: `[B, heads, N, d_k/h]`.
    pub rho_k: Var,
    /// `[B, heads, N, d_v/h]`.
    pub v: Var,
    /// `ρ_kᵀ·V`: `[B, heads, d_k/h, d_v/h]`.
    pub channel_matrix: Var,
    /// `ρ_q·(ρ_kᵀ·V)` before the output projection, heads merged.
    pub attended: Var,
    pub output: Var,
}

impl ChannelAwareAttention {
    pub fn new(init: &mut Init<'_>, name: &str, params: AttentionParams) -> Result<Self> {
        params.validate()?;
        let d = params.d_model;
        Ok(init.scope(name, |i| Self {
            params,
            q: Linear::new(i, "q", d, params.d_k),
            k: Linear::new(i, "k", d, params.d_k),
            v: Linear::new(i, "v", d, params.d_v),
            proj: Linear::new(i, "proj", params.d_v, d),
        }))
    }

    pub fn forward_parts(&self, cx: &mut Ctx<'_>, x: Var) -> Result<ChannelAttentionParts> {
        let s = cx.shape(x);
        check_tokens("channel_aware_attention", &s, self.params.d_model)?;
        let inv_sqrt_n = 1.0 / (s[1] as f64).sqrt();
        let heads = self.params.heads;
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let (q, k, v) = (
            split_heads(cx, q, heads)?,
            split_heads(cx, k, heads)?,
            split_heads(cx, v, heads)?,
        );
        let k = cx.tape.scale(k, inv_sqrt_n)?;
        let rho_k = cx.tape.softmax(k, 2)?;
        let q = cx.tape.scale(q, inv_sqrt_n)?;
        let rho_q = cx.tape.softmax(q, 3)?;
        let kt = cx.tape.transpose(rho_k)?;
        let channel_matrix = cx.tape.matmul(kt, v)?;
        let out = cx.tape.matmul(rho_q, channel_matrix)?;
        let attended = merge_heads(cx, out)?;
        let output = self.proj.forward(cx, attended)?;
        Ok(ChannelAttentionParts {
            rho_q,
            rho_k,
            v,
            channel_matrix,
            attended,
            output,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, x)?.output)
    }
}

/// `x ← CPE(x); x ← x + FA(LN(x)); x ← x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EfficientTransformerBlock {
    pub cpe: ConvPosEnc,
    pub norm1: LayerNorm,
    pub attn: FactorizedAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EfficientTransformerBlock {
    pub fn new(init: &mut Init<'_>, name: &str, params: AttentionParams, crpe: bool) -> Result<Self> {
        let d = params.d_model;
        init.scope(name, |i| {
            Ok(Self {
                cpe: ConvPosEnc::new(i, "cpe", d),
                norm1: LayerNorm::new(i, "norm1", d),
                attn: FactorizedAttention::new(i, "attn", params, crpe)?,
                norm2: LayerNorm::new(i, "norm2", d),
                ffn: FeedForward::new(i, "ffn", d),
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, hw: (usize, usize)) -> Result<Var> {
        let x = self.cpe.forward(cx, x, hw)?;
        let h = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, hw)?;
        let x = cx.tape.add(x, a)?;
        let h = self.norm2.forward(cx, x)?;
        let f = self.ffn.forward(cx, h)?;
        cx.tape.add(x, f)
    }
}

/// Stack of blocks at one resolution.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<EfficientTransformerBlock>,
}

impl TransformerStack {
    pub fn new(init: &mut Init<'_>, name: &str, depth: usize, params: AttentionParams, crpe: bool) -> Result<Self> {
        init.scope(name, |i| {
            let blocks = (0..depth)
                .map(|d| EfficientTransformerBlock::new(i, &format!("block{d}"), params, crpe))
                .collect::<Result<_>>()?;
            Ok(Self { blocks })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, mut x: Var, hw: (usize, usize)) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(cx, x, hw)?;
        }
        Ok(x)
    }

    /// Apply to a `[B, C, H, W]` map.
    pub fn forward_map(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let s = cx.shape(x);
        let t = map_to_tokens(cx, x)?;
        let t = self.forward(cx, t, (s[2], s[3]))?;
        tokens_to_map(cx, t, s[2], s[3])
    }
}

/// Which mechanism a flop measurement exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Factorized,
    TokenAware,
    ChannelAware,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factorized" | "f" => Ok(Self::Factorized),
            "token" | "token-aware" | "t" => Ok(Self::TokenAware),
            "channel" | "channel-aware" | "c" => Ok(Self::ChannelAware),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Factorized => "factorized",
            Self::TokenAware => "token-aware",
            Self::ChannelAware => "channel-aware",
        })
    }
}

/// A grid `(h, w)` with `h·w = n` and `h` the largest power of two not above `√n`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut h = 1;
    while (h * 2) * (h * 2) <= n && n % (h * 2) == 0 {
        h *= 2;
    }
    (h, n / h)
}

/// Counted floating-point operations and wall time of one forward pass of
/// `kind` over `n` random tokens of depth `dim`.
pub fn measure_attention(kind: AttentionKind, n: usize, dim: usize, reduction: usize, seed: u64) -> Result<(u64, f64)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let mut init = Init::new(&mut store, &mut rng);
    enum Built {
        F(FactorizedAttention),
        T(TokenAwareAttention),
        C(ChannelAwareAttention),
    }
    let built = match kind {
        AttentionKind::Factorized => Built::F(FactorizedAttention::new(&mut init, "attn", AttentionParams::new(dim, 1), true)?),
        AttentionKind::TokenAware => Built::T(TokenAwareAttention::new(
            &mut init,
            "attn",
            AttentionParams::new(dim, 1).with_reduction(reduction),
        )?),
        AttentionKind::ChannelAware => Built::C(ChannelAwareAttention::new(&mut init, "attn", AttentionParams::channel_aware(dim))?),
    };
    let x = Tensor::from_fn(&[1, n, dim], |_| rng.range(-1.0, 1.0));
    let mut cx = Ctx::inference(&store, crate::nn::Mode::Eval);
    let xv = cx.input(x);
    let start = std::time::Instant::now();
    match &built {
        Built::F(a) => a.forward(&mut cx, xv, grid_for(n))?,
        Built::T(a) => a.forward(&mut cx, xv)?,
        Built::C(a) => a.forward(&mut cx, xv)?,
    };
    Ok((cx.tape.flops(), start.elapsed().as_secs_f64()))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
