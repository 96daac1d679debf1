//! Dual transformer bridge over the concatenated multi-scale token sequence.
//!
//! Each stage map `[B, cᵢ, hᵢ, wᵢ]` is laid out channels-last and cut into
//! tokens of the base depth `C`, so stage `i` contributes `cᵢhᵢwᵢ/C` tokens.
//! Four bridge layers then mix the whole sequence with channel-aware or
//! token-aware attention, each followed by position-wise feed-forward
//! networks applied per stage on the restored maps.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionParams, ChannelAwareAttention, TokenAwareAttention};
use crate::autodiff::Var;
use crate::encoder::StageFeatures;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Ctx, FeedForward, Init, LayerNorm, Linear};

pub const BRIDGE_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Channel,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arrangement {
    Serial([LayerKind; BRIDGE_DEPTH]),
    /// A channel and a token layer on the same input, merged `2C → C`,
    /// followed by two token layers.
    Parallel,
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "para" {
            return Ok(Self::Parallel);
        }
        let kinds: Vec<LayerKind> = s
            .chars()
            .map(|ch| match ch {
                'c' => Ok(LayerKind::Channel),
                't' => Ok(LayerKind::Token),
                _ => Err(()),
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bridge arrangement `{s}` must use only `c` and `t`, or be `para`")))?;
        let kinds: [LayerKind; BRIDGE_DEPTH] = kinds
            .try_into()
            .map_err(|_| Error::Config(format!("bridge arrangement `{s}` must have {BRIDGE_DEPTH} layers")))?;
        Ok(Self::Serial(kinds))
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parallel => f.write_str("para"),
            Self::Serial(kinds) => {
                for k in kinds {
                    f.write_str(match k {
                        LayerKind::Channel => "c",
                        LayerKind::Token => "t",
                    })?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeConfig {
    pub arrangement: Arrangement,
    /// Spatial reduction ratio of every token-aware layer.
    pub reduction: usize,
    /// Per-stage feed-forward block after the last layer.
    pub final_ffn: bool,
}

impl BridgeConfig {
    pub fn full_scale() -> Self {
        Self {
            arrangement: Arrangement::Serial([LayerKind::Channel, LayerKind::Token, LayerKind::Token, LayerKind::Token]),
            reduction: 4,
            final_ffn: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            reduction: 1,
            ..Self::full_scale()
        }
    }
}

/// The flattened multi-stage sequence and what is needed to undo it.
#[derive(Debug, Clone)]
pub struct BridgeSequence {
    /// `[B, N_total, C]`.
    pub tokens: Var,
    pub segment_lengths: Vec<usize>,
    /// `(channels, h, w)` per stage.
    pub stage_shapes: Vec<[usize; 3]>,
}

impl BridgeSequence {
    pub fn total(&self) -> usize {
        self.segment_lengths.iter().sum()
    }
}

/// Token counts per stage when maps of `stage_shapes` are cut into depth-`dim` tokens.
pub fn segment_lengths(stage_shapes: &[[usize; 3]], dim: usize) -> Result<Vec<usize>> {
    stage_shapes
        .iter()
        .map(|&[c, h, w]| {
            if dim == 0 || (c * h * w) % dim != 0 {
                Err(Error::invalid(
                    "flatten_concat",
                    format!("stage of {c}x{h}x{w} values does not split into tokens of depth {dim}"),
                ))
            } else {
                Ok(c * h * w / dim)
            }
        })
        .collect()
}

pub fn flatten_concat(cx: &mut Ctx<'_>, maps: &[Var], dim: usize) -> Result<BridgeSequence> {
    let mut shapes = Vec::with_capacity(maps.len());
    let mut batch = None;
    for &m in maps {
        let s = cx.shape(m);
        if s.len() != 4 || batch.is_some_and(|b| b != s[0]) {
            return Err(Error::invalid("flatten_concat", format!("unexpected stage shape {s:?}")));
        }
        batch = Some(s[0]);
        shapes.push([s[1], s[2], s[3]]);
    }
    let lengths = segment_lengths(&shapes, dim)?;
    let b = batch.ok_or_else(|| Error::invalid("flatten_concat", "no stages"))?;
    let mut parts = Vec::with_capacity(maps.len());
    for (&m, &n) in maps.iter().zip(&lengths) {
        let p = cx.tape.permute(m, &[0, 2, 3, 1])?;
        parts.push(cx.tape.reshape(p, &[b, n, dim])?);
    }
    Ok(BridgeSequence {
        tokens: cx.tape.concat(&parts, 1)?,
        segment_lengths: lengths,
        stage_shapes: shapes,
    })
}

/// Split `tokens` (laid out like `seq`) back into `[B, cᵢ, hᵢ, wᵢ]` maps.
pub fn restore(cx: &mut Ctx<'_>, seq: &BridgeSequence, tokens: Var) -> Result<Vec<Var>> {
    let s = cx.shape(tokens);
    if s.len() != 3 || s[1] != seq.total() {
        return Err(Error::invalid(
            "restore",
            format!("{s:?} does not hold {} tokens", seq.total()),
        ));
    }
    let parts = cx.tape.split(tokens, 1, &seq.segment_lengths)?;
    let mut maps = Vec::with_capacity(parts.len());
    for (p, &[c, h, w]) in parts.into_iter().zip(&seq.stage_shapes) {
        let r = cx.tape.reshape(p, &[s[0], h, w, c])?;
        maps.push(cx.tape.permute(r, &[0, 3, 1, 2])?);
    }
    Ok(maps)
}

fn flatten_like(cx: &mut Ctx<'_>, seq: &BridgeSequence, maps: &[Var], dim: usize) -> Result<Var> {
    let next = flatten_concat(cx, maps, dim)?;
    debug_assert_eq!(next.segment_lengths, seq.segment_lengths);
    Ok(next.tokens)
}

#[derive(Debug, Clone)]
pub enum BridgeAttention {
    Channel(ChannelAwareAttention),
    Token(TokenAwareAttention),
}

impl BridgeAttention {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Channel(a) => a.forward(cx, x),
            Self::Token(a) => a.forward(cx, x),
        }
    }
}

/// Position-wise feed-forward per stage with a pre-norm residual.
#[derive(Debug, Clone)]
pub struct StageFeedForward {
    pub norms: Vec<LayerNorm>,
    pub ffns: Vec<FeedForward>,
}

impl StageFeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, stage_dims: &[usize]) -> Self {
        init.scope(name, |i| Self {
            norms: stage_dims
                .iter()
                .enumerate()
                .map(|(s, &d)| LayerNorm::new(i, &format!("norm{s}"), d))
                .collect(),
            ffns: stage_dims
                .iter()
                .enumerate()
                .map(|(s, &d)| FeedForward::new(i, &format!("ffn{s}"), d))
                .collect(),
        })
    }

    /// `map + FFN(LN(map))` on the tokens of each restored map.
    pub fn forward(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<Vec<Var>> {
        maps.iter()
            .zip(self.norms.iter().zip(&self.ffns))
            .map(|(&m, (norm, ffn))| {
                let s = cx.shape(m);
                let t = map_to_tokens(cx, m)?;
                let n = norm.forward(cx, t)?;
                let f = ffn.forward(cx, n)?;
                let f = tokens_to_map(cx, f, s[2], s[3])?;
                cx.tape.add(m, f)
            })
            .collect()
    }

    /// Per-stage feed-forward without residual on the tokens of each restored map.
    fn delta(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<Vec<Var>> {
        maps.iter()
            .zip(&self.ffns)
            .map(|(&m, ffn)| {
                let s = cx.shape(m);
                let t = map_to_tokens(cx, m)?;
                let f = ffn.forward(cx, t)?;
                tokens_to_map(cx, f, s[2], s[3])
            })
            .collect()
    }
}

/// `S = Y + Attn(LN₁(Y))`, then `L = S + flatten(FFNᵢ(restoreᵢ(LN₂(S))))`.
#[derive(Debug, Clone)]
pub struct BridgeLayer {
    pub kind: LayerKind,
    pub norm1: LayerNorm,
    pub attn: BridgeAttention,
    pub norm2: LayerNorm,
    pub ffn: StageFeedForward,
    pub dim: usize,
}

impl BridgeLayer {
    pub fn new(init: &mut Init<'_>, name: &str, kind: LayerKind, dim: usize, stage_dims: &[usize], reduction: usize) -> Result<Self> {
        init.scope(name, |i| {
            let attn = match kind {
                LayerKind::Channel => BridgeAttention::Channel(ChannelAwareAttention::new(
                    i,
                    "attn",
                    AttentionParams::channel_aware(dim),
                )?),
                LayerKind::Token => BridgeAttention::Token(TokenAwareAttention::new(
                    i,
                    "attn",
                    AttentionParams::new(dim, 1).with_reduction(reduction),
                )?),
            };
            Ok(Self {
                kind,
                norm1: LayerNorm::new(i, "norm1", dim),
                attn,
                norm2: LayerNorm::new(i, "norm2", dim),
                ffn: StageFeedForward::new(i, "ffn", stage_dims),
                dim,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, seq: &BridgeSequence, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, h)?;
        let s = cx.tape.add(x, a)?;
        let n = self.norm2.forward(cx, s)?;
        let maps = restore(cx, seq, n)?;
        let f = self.ffn.delta(cx, &maps)?;
        let f = flatten_like(cx, seq, &f, self.dim)?;
        cx.tape.add(s, f)
    }
}

#[derive(Debug, Clone)]
pub struct Bridge {
    pub cfg: BridgeConfig,
    pub dim: usize,
    pub layers: Vec<BridgeLayer>,
    /// `2C → C` merge of the parallel arrangement.
    pub merge: Option<Linear>,
    pub output: Option<StageFeedForward>,
}

impl Bridge {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: BridgeConfig, stage_dims: &[usize]) -> Result<Self> {
        if cfg.reduction == 0 {
            return Err(Error::Config("bridge reduction must be at least 1".into()));
        }
        let dim = *stage_dims
            .first()
            .ok_or_else(|| Error::Config("bridge needs at least one stage".into()))?;
        let kinds = match cfg.arrangement {
            Arrangement::Serial(k) => k,
            Arrangement::Parallel => [LayerKind::Channel, LayerKind::Token, LayerKind::Token, LayerKind::Token],
        };
        init.scope(name, |i| {
            let layers = kinds
                .iter()
                .enumerate()
                .map(|(l, &k)| BridgeLayer::new(i, &format!("layer{l}"), k, dim, stage_dims, cfg.reduction))
                .collect::<Result<_>>()?;
            Ok(Self {
                cfg,
                dim,
                layers,
                merge: (cfg.arrangement == Arrangement::Parallel).then(|| Linear::new(i, "merge", 2 * dim, dim)),
                output: cfg.final_ffn.then(|| StageFeedForward::new(i, "out", stage_dims)),
            })
        })
    }

    /// Reject sequences the token-aware layers cannot reduce.
    pub fn check_tokens(&self, total: usize) -> Result<()> {
        let uses_token = self.layers.iter().any(|l| l.kind == LayerKind::Token);
        if uses_token && total % self.cfg.reduction != 0 {
            return Err(Error::Config(format!(
                "{total} bridge tokens not divisible by reduction ratio {}",
                self.cfg.reduction
            )));
        }
        Ok(())
    }

    /// Run the layers on an already flattened sequence.
    pub fn forward_tokens(&self, cx: &mut Ctx<'_>, seq: &BridgeSequence) -> Result<Var> {
        self.check_tokens(seq.total())?;
        let mut x = seq.tokens;
        let rest = match &self.merge {
            Some(merge) => {
                let a = self.layers[0].forward(cx, seq, x)?;
                let b = self.layers[1].forward(cx, seq, x)?;
                let c = cx.tape.concat(&[a, b], 2)?;
                x = merge.forward(cx, c)?;
                &self.layers[2..]
            }
            None => &self.layers[..],
        };
        for layer in rest {
            x = layer.forward(cx, seq, x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, features: &StageFeatures) -> Result<StageFeatures> {
        let seq = flatten_concat(cx, &features.0, self.dim)?;
        let x = self.forward_tokens(cx, &seq)?;
        let mut maps = restore(cx, &seq, x)?;
        if let Some(out) = &self.output {
            maps = out.forward(cx, &maps)?;
        }
        Ok(StageFeatures([maps[0], maps[1], maps[2], maps[3]]))
    }
}

#[cfg(test)]
mod tests;
