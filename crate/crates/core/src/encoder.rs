//! Four-stage hierarchical encoder.
//!
//! Stage 1 embeds overlapping patches and runs two efficient transformer
//! blocks. Stages 2–4 downsample with a residual inception patch merging
//! module (a single chain of 3×3 convolutions tapped after each layer),
//! process every branch with its own transformer stack, and fuse the
//! branches back to the stage depth.

use crate::attention::{AttentionParams, TransformerStack};
use crate::autodiff::{Activation, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, Ctx, Init, LayerNorm};

/// Channel multipliers of the four stages relative to the base depth.
pub const STAGE_MULTIPLIERS: [usize; 4] = [1, 2, 5, 8];
pub const DEFAULT_HEADS: [usize; 4] = [1, 2, 5, 8];
pub const STAGE1_DEPTH: usize = 2;

/// How the branches of a stage are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Dual-axis pooled gating followed by a 1×1 projection.
    Iff,
    /// Concatenation followed by a 1×1 projection.
    Naive1x1,
}

/// Downsampling and transformer layout of stages 2–4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageLayout {
    /// Single 3×3 stride-2 patch merging and one transformer stack.
    PatchMerging,
    /// Inception patch merging, branches fused, then one transformer stack.
    InceptionSingle,
    /// Inception patch merging with a transformer stack per branch.
    InceptionMultiBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_dim: usize,
    pub layer_list: [usize; 3],
    pub branch_list: [usize; 3],
    pub heads: [usize; 4],
    pub iff_reduction: usize,
    pub fusion: FusionMode,
    pub layout: StageLayout,
    pub crpe: bool,
}

impl EncoderConfig {
    pub fn full_scale() -> Self {
        Self {
            in_channels: 3,
            base_dim: 64,
            layer_list: [3, 8, 3],
            branch_list: [3, 3, 3],
            heads: DEFAULT_HEADS,
            iff_reduction: 16,
            fusion: FusionMode::Iff,
            layout: StageLayout::InceptionMultiBranch,
            crpe: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            base_dim: 8,
            layer_list: [1, 1, 1],
            iff_reduction: 4,
            ..Self::full_scale()
        }
    }

    pub fn stage_dims(&self) -> [usize; 4] {
        STAGE_MULTIPLIERS.map(|m| m * self.base_dim)
    }

    /// Number of maps fused in stage `i ∈ {2,3,4}`.
    pub fn fused_inputs(&self, stage: usize) -> usize {
        let k = self.branch_list[stage - 2];
        match self.layout {
            StageLayout::PatchMerging => 1,
            StageLayout::InceptionSingle => k,
            StageLayout::InceptionMultiBranch => k + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("base and input depths must be positive".into()));
        }
        for &k in &self.branch_list {
            if !(2..=3).contains(&k) {
                return Err(Error::Config(format!("branch count {k} not in {{2, 3}}")));
            }
        }
        for (dim, &h) in self.stage_dims().iter().zip(&self.heads) {
            AttentionParams::new(*dim, h).validate()?;
        }
        if self.fusion == FusionMode::Iff && self.layout == StageLayout::InceptionMultiBranch {
            if self.iff_reduction == 0 {
                return Err(Error::Config("fusion reduction must be positive".into()));
            }
            for stage in 2..=4 {
                let width = self.fused_inputs(stage) * self.stage_dims()[stage - 1];
                if width % self.iff_reduction != 0 {
                    return Err(Error::Config(format!(
                        "fusion reduction {} does not divide {width} channels in stage {stage}",
                        self.iff_reduction
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Encoder outputs `y1..y4` at strides 4, 8, 16, 32.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures(pub [Var; 4]);

/// 7×7 stride-4 convolution followed by channel layer norm.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl OverlapPatchEmbed {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Self {
        init.scope(name, |i| Self {
            conv: Conv2d::new(i, "conv", ConvSpec::new(cin, cout, 7, 4, 3)),
            norm: LayerNorm::new(i, "norm", cout),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = cx.shape(x);
        if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::invalid(
                "overlapped_patch_embedding",
                format!("spatial extents of {s:?} must be divisible by 4"),
            ));
        }
        let y = self.conv.forward(cx, x)?;
        self.norm.forward_map(cx, y)
    }
}

/// Residual inception patch merging: one chain of 3×3 convolutions, the
/// first with stride 2. Branch `b` taps the chain after its `b`-th layer, so
/// branch receptive fields are 3, 5, 7.
#[derive(Debug, Clone)]
pub struct Ripm {
    pub chain: Vec<Conv2d>,
    pub norms: Vec<LayerNorm>,
}

impl Ripm {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, branches: usize) -> Self {
        init.scope(name, |i| {
            let chain = (0..branches)
                .map(|b| {
                    let spec = if b == 0 {
                        ConvSpec::new(cin, cout, 3, 2, 1)
                    } else {
                        ConvSpec::new(cout, cout, 3, 1, 1)
                    };
                    Conv2d::new(i, &format!("conv{b}"), spec)
                })
                .collect();
            let norms = (0..branches).map(|b| LayerNorm::new(i, &format!("norm{b}"), cout)).collect();
            Self { chain, norms }
        })
    }

    pub fn branches(&self) -> usize {
        self.chain.len()
    }

    /// Kernel weights linking one input channel to one output channel
    /// across the whole chain.
    pub fn kernel_params_per_channel_pair(&self) -> usize {
        self.chain.len() * 9
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Vec<Var>> {
        let s = cx.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::invalid("ripm", format!("spatial extents of {s:?} must be even")));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(self.chain.len());
        for (conv, norm) in self.chain.iter().zip(&self.norms) {
            h = conv.forward(cx, h)?;
            let n = norm.forward_map(cx, h)?;
            outs.push(cx.tape.activation(n, Activation::Gelu)?);
        }
        Ok(outs)
    }
}

/// A transformer stack per branch plus a 3×3 convolution on the first
/// (kernel-3) branch, giving `k + 1` outputs.
#[derive(Debug, Clone)]
pub struct MultiBranchTransformer {
    pub stacks: Vec<TransformerStack>,
    pub conv: Conv2d,
}

impl MultiBranchTransformer {
    pub fn new(init: &mut Init<'_>, name: &str, branches: usize, depth: usize, params: AttentionParams, crpe: bool) -> Result<Self> {
        init.scope(name, |i| {
            let stacks = (0..branches)
                .map(|b| TransformerStack::new(i, &format!("branch{b}"), depth, params, crpe))
                .collect::<Result<_>>()?;
            let d = params.d_model;
            let conv = Conv2d::new(i, "conv", ConvSpec::new(d, d, 3, 1, 1));
            Ok(Self { stacks, conv })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<Vec<Var>> {
        if maps.len() != self.stacks.len() {
            return Err(Error::invalid(
                "mb_transformer",
                format!("{} maps for {} branches", maps.len(), self.stacks.len()),
            ));
        }
        let s0 = cx.shape(maps[0]);
        if maps.iter().any(|&m| cx.shape(m) != s0) {
            return Err(Error::invalid("mb_transformer", "branch maps differ in shape"));
        }
        let mut outs = Vec::with_capacity(maps.len() + 1);
        for (stack, &m) in self.stacks.iter().zip(maps) {
            outs.push(stack.forward_map(cx, m)?);
        }
        outs.push(self.conv.forward(cx, maps[0])?);
        Ok(outs)
    }
}

/// Dual-axis feature fusion.
#[derive(Debug, Clone)]
pub struct Iff {
    pub reduce: Conv2d,
    pub bn: BatchNorm,
    pub gate_h: Conv2d,
    pub gate_w: Conv2d,
    pub proj: Conv2d,
    pub inputs: usize,
}

/// Intermediate tensors of [`Iff`], exposed for verification.
#[derive(Debug, Clone, Copy)]
pub struct IffParts {
    pub concat: Var,
    /// Width-averaged descriptor `[B, nC', h, 1]`.
    pub z_h: Var,
    /// Height-averaged descriptor `[B, nC', 1, w]`.
    pub z_w: Var,
    pub g_h: Var,
    pub g_w: Var,
    /// `X ⊙ g^h ⊙ g^w` before the projection.
    pub gated: Var,
    pub output: Var,
}

impl Iff {
    pub fn new(init: &mut Init<'_>, name: &str, inputs: usize, branch_dim: usize, out_dim: usize, reduction: usize) -> Result<Self> {
        let width = inputs * branch_dim;
        if inputs < 2 || reduction == 0 || width % reduction != 0 {
            return Err(Error::Config(format!(
                "fusion of {inputs} inputs with reduction {reduction} over {width} channels"
            )));
        }
        let mid = width / reduction;
        Ok(init.scope(name, |i| Self {
            reduce: Conv2d::new(i, "reduce", ConvSpec::pointwise(width, mid)),
            bn: BatchNorm::new(i, "bn", mid),
            gate_h: Conv2d::new(i, "gate_h", ConvSpec::pointwise(mid, width)),
            gate_w: Conv2d::new(i, "gate_w", ConvSpec::pointwise(mid, width)),
            proj: Conv2d::new(i, "proj", ConvSpec::pointwise(width, out_dim)),
            inputs,
        }))
    }

    pub fn forward_parts(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<IffParts> {
        if maps.len() != self.inputs {
            return Err(Error::invalid("iff", format!("{} inputs, expected {}", maps.len(), self.inputs)));
        }
        let concat = cx.tape.concat(maps, 1)?;
        let s = cx.shape(concat);
        let (h, w) = (s[2], s[3]);
        let z_h = cx.tape.mean_axis(concat, 3)?;
        let z_w = cx.tape.mean_axis(concat, 2)?;
        let z_w_col = cx.tape.permute(z_w, &[0, 1, 3, 2])?;
        let z = cx.tape.concat(&[z_h, z_w_col], 2)?;
        let f = self.reduce.forward(cx, z)?;
        let f = self.bn.forward(cx, f)?;
        let f = cx.tape.activation(f, Activation::Silu)?;
        let parts = cx.tape.split(f, 2, &[h, w])?;
        let f_w = cx.tape.permute(parts[1], &[0, 1, 3, 2])?;
        let g_h = self.gate_h.forward(cx, parts[0])?;
        let g_h = cx.tape.activation(g_h, Activation::Sigmoid)?;
        let g_w = self.gate_w.forward(cx, f_w)?;
        let g_w = cx.tape.activation(g_w, Activation::Sigmoid)?;
        let gated = cx.tape.mul(concat, g_h)?;
        let gated = cx.tape.mul(gated, g_w)?;
        let output = self.proj.forward(cx, gated)?;
        Ok(IffParts {
            concat,
            z_h,
            z_w,
            g_h,
            g_w,
            gated,
            output,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<Var> {
        Ok(self.forward_parts(cx, maps)?.output)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Iff(Iff),
    Naive(Conv2d),
}

impl Fusion {
    fn new(init: &mut Init<'_>, mode: FusionMode, inputs: usize, branch_dim: usize, out_dim: usize, reduction: usize) -> Result<Self> {
        match mode {
            FusionMode::Iff => Ok(Self::Iff(Iff::new(init, "iff", inputs, branch_dim, out_dim, reduction)?)),
            FusionMode::Naive1x1 => Ok(Self::Naive(Conv2d::new(
                init,
                "fuse",
                ConvSpec::pointwise(inputs * branch_dim, out_dim),
            ))),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, maps: &[Var]) -> Result<Var> {
        match self {
            Self::Iff(f) => f.forward(cx, maps),
            Self::Naive(conv) => {
                let c = cx.tape.concat(maps, 1)?;
                conv.forward(cx, c)
            }
        }
    }
}

/// One of stages 2–4.
#[derive(Debug, Clone)]
pub enum Stage {
    Single {
        merge: Ripm,
        fuse: Option<Fusion>,
        stack: TransformerStack,
    },
    MultiBranch {
        merge: Ripm,
        mb: MultiBranchTransformer,
        fuse: Fusion,
    },
}

impl Stage {
    pub fn merge(&self) -> &Ripm {
        match self {
            Self::Single { merge, .. } | Self::MultiBranch { merge, .. } => merge,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Single { merge, fuse, stack } => {
                let branches = merge.forward(cx, x)?;
                let y = match fuse {
                    Some(f) => f.forward(cx, &branches)?,
                    None => branches[0],
                };
                stack.forward_map(cx, y)
            }
            Self::MultiBranch { merge, mb, fuse } => {
                let branches = merge.forward(cx, x)?;
                let outs = mb.forward(cx, &branches)?;
                fuse.forward(cx, &outs)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: OverlapPatchEmbed,
    pub stage1: TransformerStack,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.stage_dims();
        init.scope(name, |i| {
            let embed = OverlapPatchEmbed::new(i, "embed", cfg.in_channels, dims[0]);
            let stage1 = TransformerStack::new(
                i,
                "stage1",
                STAGE1_DEPTH,
                AttentionParams::new(dims[0], cfg.heads[0]),
                cfg.crpe,
            )?;
            let mut stages = Vec::with_capacity(3);
            for s in 2..=4 {
                let (cin, cout) = (dims[s - 2], dims[s - 1]);
                let k = cfg.branch_list[s - 2];
                let depth = cfg.layer_list[s - 2];
                let params = AttentionParams::new(cout, cfg.heads[s - 1]);
                let stage = i.scope(&format!("stage{s}"), |i| -> Result<Stage> {
                    Ok(match cfg.layout {
                        StageLayout::PatchMerging => Stage::Single {
                            merge: Ripm::new(i, "merge", cin, cout, 1),
                            fuse: None,
                            stack: TransformerStack::new(i, "blocks", depth, params, cfg.crpe)?,
                        },
                        StageLayout::InceptionSingle => Stage::Single {
                            merge: Ripm::new(i, "merge", cin, cout, k),
                            fuse: Some(Fusion::new(i, FusionMode::Naive1x1, k, cout, cout, 1)?),
                            stack: TransformerStack::new(i, "blocks", depth, params, cfg.crpe)?,
                        },
                        StageLayout::InceptionMultiBranch => Stage::MultiBranch {
                            merge: Ripm::new(i, "merge", cin, cout, k),
                            mb: MultiBranchTransformer::new(i, "mb", k, depth, params, cfg.crpe)?,
                            fuse: Fusion::new(i, cfg.fusion, k + 1, cout, cout, cfg.iff_reduction)?,
                        },
                    })
                })?;
                stages.push(stage);
            }
            Ok(Self {
                cfg: cfg.clone(),
                embed,
                stage1,
                stages,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<StageFeatures> {
        let s = cx.shape(x);
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::invalid(
                "encoder_forward",
                format!(
                    "expected [B, {}, H, W] with H and W divisible by 32, got {s:?}",
                    self.cfg.in_channels
                ),
            ));
        }
        let e = self.embed.forward(cx, x)?;
        let y1 = self.stage1.forward_map(cx, e)?;
        let y2 = self.stages[0].forward(cx, y1)?;
        let y3 = self.stages[1].forward(cx, y2)?;
        let y4 = self.stages[2].forward(cx, y3)?;
        Ok(StageFeatures([y1, y2, y3, y4]))
    }
}

/// Expected `[channels, h, w]` of each stage output for an `h × w` input.
pub fn stage_shapes(base_dim: usize, h: usize, w: usize) -> [[usize; 3]; 4] {
    let mut out = [[0; 3]; 4];
    for (i, m) in STAGE_MULTIPLIERS.iter().enumerate() {
        let stride = 4 << i;
        out[i] = [m * base_dim, h / stride, w / stride];
    }
    out
}
