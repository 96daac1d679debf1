//! Patch-expanding decoder, segmentation head and the assembled variants.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionParams, TransformerStack};
use crate::autodiff::Var;
use crate::bridge::{segment_lengths, Arrangement, Bridge, BridgeConfig};
use crate::encoder::{stage_shapes, Encoder, EncoderConfig, FusionMode, StageFeatures, StageLayout};
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, ConvSpec, Ctx, Init, LayerNorm, Linear, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ablation lattice of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Single-path patch merging and one transformer stack per stage.
    EffFormer,
    /// Inception patch merging, 1×1 fused, one transformer stack.
    S,
    /// Inception patch merging, multi-branch transformer, 1×1 fusion.
    Rm,
    /// As `Rm` with gated dual-axis fusion.
    Rmi,
    /// As `Rmi` with the dual transformer bridge on the skip path.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::EffFormer, Self::S, Self::Rm, Self::Rmi, Self::Full];

    pub fn layout(self) -> StageLayout {
        match self {
            Self::EffFormer => StageLayout::PatchMerging,
            Self::S => StageLayout::InceptionSingle,
            Self::Rm | Self::Rmi | Self::Full => StageLayout::InceptionMultiBranch,
        }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            Self::Rmi | Self::Full => FusionMode::Iff,
            _ => FusionMode::Naive1x1,
        }
    }

    pub fn uses_bridge(self) -> bool {
        self == Self::Full
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effformer" => Ok(Self::EffFormer),
            "s" => Ok(Self::S),
            "rm" => Ok(Self::Rm),
            "rmi" => Ok(Self::Rmi),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected effformer, s, rm, rmi or full)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EffFormer => "effformer",
            Self::S => "s",
            Self::Rm => "rm",
            Self::Rmi => "rmi",
            Self::Full => "full",
        })
    }
}

/// Preset dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// `C = 8`, one transformer layer per stage, 32×32 inputs.
    Desk,
    /// `C = 64`, layer list `[3, 8, 3]`, 224×224 inputs.
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected desk or full)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: Scale,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub bridge: BridgeConfig,
    pub num_classes: usize,
    pub decoder_depth: usize,
    /// Square input extent.
    pub image_size: usize,
}

pub const DECODER_DEPTH: usize = 2;

impl ModelConfig {
    pub fn preset(scale: Scale, variant: Variant) -> Self {
        let (encoder, bridge, num_classes, image_size) = match scale {
            Scale::Desk => (EncoderConfig::desk(), BridgeConfig::desk(), 2, 32),
            Scale::Full => (EncoderConfig::full_scale(), BridgeConfig::full_scale(), 9, 224),
        };
        let mut cfg = Self {
            scale,
            variant,
            encoder,
            bridge,
            num_classes,
            decoder_depth: DECODER_DEPTH,
            image_size,
        };
        cfg.set_variant(variant);
        cfg
    }

    pub fn desk(variant: Variant) -> Self {
        Self::preset(Scale::Desk, variant)
    }

    pub fn set_variant(&mut self, variant: Variant) {
        self.variant = variant;
        self.encoder.layout = variant.layout();
        self.encoder.fusion = variant.fusion();
    }

    pub fn use_bridge(&self) -> bool {
        self.variant.uses_bridge()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.encoder.base_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "base_dim {} must be even so every decoder stage can halve its depth",
                self.encoder.base_dim
            )));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.use_bridge() {
            if self.bridge.reduction == 0 {
                return Err(Error::Config("bridge_reduction must be at least 1".into()));
            }
            let shapes = stage_shapes(self.encoder.base_dim, self.image_size, self.image_size);
            segment_lengths(&shapes, self.encoder.base_dim)?;
        }
        Ok(())
    }

    /// Canonical `key=value` pairs (sorted).
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let e = &self.encoder;
        BTreeMap::from([
            ("scale", self.scale.to_string()),
            ("variant", self.variant.to_string()),
            ("in_channels", e.in_channels.to_string()),
            ("base_dim", e.base_dim.to_string()),
            ("layers", list(&e.layer_list)),
            ("branches", list(&e.branch_list)),
            ("heads", list(&e.heads)),
            ("iff_reduction", e.iff_reduction.to_string()),
            ("crpe", e.crpe.to_string()),
            ("bridge", self.bridge.arrangement.to_string()),
            ("bridge_reduction", self.bridge.reduction.to_string()),
            ("bridge_final_ffn", self.bridge.final_ffn.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("image_size", self.image_size.to_string()),
        ])
    }

    /// Apply one key; `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let e = &mut self.encoder;
        match key {
            "scale" => {
                let v = self.variant;
                *self = Self::preset(value.parse()?, v);
            }
            "variant" => self.set_variant(value.parse()?),
            "in_channels" => e.in_channels = parse_num(key, value)?,
            "base_dim" => e.base_dim = parse_num(key, value)?,
            "layers" => e.layer_list = parse_list(key, value)?,
            "branches" => e.branch_list = parse_list(key, value)?,
            "heads" => e.heads = parse_list(key, value)?,
            "iff_reduction" => e.iff_reduction = parse_num(key, value)?,
            "crpe" => e.crpe = parse_bool(key, value)?,
            "bridge" => self.bridge.arrangement = value.parse::<Arrangement>()?,
            "bridge_reduction" => self.bridge.reduction = parse_num(key, value)?,
            "bridge_final_ffn" => self.bridge.final_ffn = parse_bool(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "decoder_depth" => self.decoder_depth = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parse canonical text; `scale` and `variant` are applied before the other keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = crate::config::parse_pairs(text)?;
        let mut cfg = Self::desk(Variant::Full);
        for first in ["scale", "variant"] {
            if let Some((_, v)) = pairs.iter().find(|(k, _)| k == first) {
                cfg.set(first, v)?;
            }
        }
        for (k, v) in &pairs {
            if k != "scale" && k != "variant" && !cfg.set(k, v)? {
                return Err(Error::UnknownKey(k.clone()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = value.split(',').map(|s| parse_num(key, s)).collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected {N} comma-separated values, got `{value}`")))
}

/// `Linear(C' → 2C')`, ×2 sub-pixel rearrangement to `C'/2` channels, layer norm.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub in_dim: usize,
}

impl PatchExpand {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize) -> Result<Self> {
        if in_dim % 2 != 0 {
            return Err(Error::Config(format!("patch expanding needs an even depth, got {in_dim}")));
        }
        Ok(init.scope(name, |i| Self {
            expand: Linear::new(i, "expand", in_dim, 2 * in_dim),
            norm: LayerNorm::new(i, "norm", in_dim / 2),
            in_dim,
        }))
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = cx.shape(x);
        if s.len() != 4 || s[1] != self.in_dim {
            return Err(Error::invalid(
                "patch_expanding",
                format!("expected [B, {}, h, w], got {s:?}", self.in_dim),
            ));
        }
        let t = map_to_tokens(cx, x)?;
        let t = self.expand.forward(cx, t)?;
        let m = tokens_to_map(cx, t, s[2], s[3])?;
        let up = cx.tape.upsample_rearrange(m, 2)?;
        self.norm.forward_map(cx, up)
    }
}

/// Expand, concatenate the skip, fuse to the stage depth, transformer blocks.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub expand: PatchExpand,
    pub fuse: Linear,
    pub blocks: TransformerStack,
}

impl DecoderStage {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        skip_dim: usize,
        out_dim: usize,
        depth: usize,
        heads: usize,
        crpe: bool,
    ) -> Result<Self> {
        init.scope(name, |i| {
            Ok(Self {
                expand: PatchExpand::new(i, "expand", in_dim)?,
                fuse: Linear::new(i, "fuse", in_dim / 2 + skip_dim, out_dim),
                blocks: TransformerStack::new(i, "blocks", depth, AttentionParams::new(out_dim, heads), crpe)?,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, skip: Var) -> Result<Var> {
        let up = self.expand.forward(cx, x)?;
        let (su, ss) = (cx.shape(up), cx.shape(skip));
        if su[0] != ss[0] || su[2..] != ss[2..] {
            return Err(Error::shape("decoder_stage", &su, &ss));
        }
        let c = cx.tape.concat(&[up, skip], 1)?;
        let t = map_to_tokens(cx, c)?;
        let t = self.fuse.forward(cx, t)?;
        let t = self.blocks.forward(cx, t, (su[2], su[3]))?;
        tokens_to_map(cx, t, su[2], su[3])
    }
}

/// `Linear(C → 16C)`, ×4 sub-pixel rearrangement, layer norm, 1×1 classifier.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub classify: Conv2d,
}

impl SegmentationHead {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, num_classes: usize) -> Self {
        init.scope(name, |i| Self {
            expand: Linear::new(i, "expand", dim, 16 * dim),
            norm: LayerNorm::new(i, "norm", dim),
            classify: Conv2d::new(i, "classify", ConvSpec::pointwise(dim, num_classes)),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = cx.shape(x);
        let t = map_to_tokens(cx, x)?;
        let t = self.expand.forward(cx, t)?;
        let m = tokens_to_map(cx, t, s[2], s[3])?;
        let up = cx.tape.upsample_rearrange(m, 4)?;
        let n = self.norm.forward_map(cx, up)?;
        self.classify.forward(cx, n)
    }
}

/// Per-pixel argmax of `[B, K, H, W]` logits; ties resolve to the lowest class.
pub fn argmax_mask(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if logits.data()[(bi * k + c) * hw + p] > logits.data()[(bi * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Named intermediate shapes recorded during a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub bridge: Option<Bridge>,
    pub decoder: Vec<DecoderStage>,
    pub head: SegmentationHead,
}

impl Model {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.encoder.stage_dims();
        let heads = cfg.encoder.heads;
        let encoder = Encoder::new(init, "encoder", &cfg.encoder)?;
        let bridge = if cfg.use_bridge() {
            let b = Bridge::new(init, "bridge", cfg.bridge, &dims)?;
            let shapes = stage_shapes(cfg.encoder.base_dim, cfg.image_size, cfg.image_size);
            b.check_tokens(segment_lengths(&shapes, dims[0])?.iter().sum())?;
            Some(b)
        } else {
            None
        };
        let decoder = init.scope("decoder", |i| {
            (0..3)
                .map(|d| {
                    let out = 2 - d;
                    DecoderStage::new(
                        i,
                        &format!("stage{d}"),
                        dims[out + 1],
                        dims[out],
                        dims[out],
                        cfg.decoder_depth,
                        heads[out],
                        cfg.encoder.crpe,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let head = SegmentationHead::new(init, "head", dims[0], cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            bridge,
            decoder,
            head,
        })
    }

    /// Logits `[B, num_classes, H, W]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_traced(cx, x, None)
    }

    pub fn forward_traced(&self, cx: &mut Ctx<'_>, x: Var, mut trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let mut record = |cx: &Ctx<'_>, name: String, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, cx.shape(v)));
            }
        };
        record(cx, "input".into(), x);
        let feats = self.encoder.forward(cx, x)?;
        for (i, &y) in feats.0.iter().enumerate() {
            record(cx, format!("encoder.y{}", i + 1), y);
        }
        let skips: StageFeatures = match &self.bridge {
            Some(b) => {
                let out = b.forward(cx, &feats)?;
                for (i, &o) in out.0.iter().enumerate() {
                    record(cx, format!("bridge.o{}", i + 1), o);
                }
                out
            }
            None => feats,
        };
        let mut x = skips.0[3];
        for (d, stage) in self.decoder.iter().enumerate() {
            x = stage.forward(cx, x, skips.0[2 - d])?;
            record(cx, format!("decoder.stage{}", d + 1), x);
        }
        let logits = self.head.forward(cx, x)?;
        record(cx, "logits".into(), logits);
        Ok(logits)
    }
}

/// Build a model with parameters initialized from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Model)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let model = {
        let mut init = Init::new(&mut store, &mut rng);
        Model::new(&mut init, cfg)?
    };
    Ok((store, model))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCCK";

/// `TCCK`, config text (u64 length + bytes), u32 tensor count, then per
/// tensor a u32 name length, name bytes and the tensor record.
pub fn write_checkpoint<W: Write>(w: &mut W, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let text = cfg.to_text();
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let all: Vec<_> = store.params().iter().chain(store.buffers()).collect();
    w.write_all(&(all.len() as u32).to_le_bytes())?;
    for named in all {
        w.write_all(&(named.name.len() as u32).to_le_bytes())?;
        w.write_all(named.name.as_bytes())?;
        named.value.write_to(w)?;
    }
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ParamStore, Model)> {
    if read_bytes(r, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("bad checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap());
    if len > 1 << 20 {
        return Err(Error::Integrity(format!("implausible config length {len}")));
    }
    let text = String::from_utf8(read_bytes(r, len as usize)?)
        .map_err(|_| Error::Integrity("config text is not UTF-8".into()))?;
    let cfg = ModelConfig::from_text(&text)?;
    let count = read_u32(r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        if n > 4096 {
            return Err(Error::Integrity(format!("implausible tensor name length {n}")));
        }
        let name = String::from_utf8(read_bytes(r, n)?).map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let t = Tensor::read_from(r)?;
        tensors.insert(name, t);
    }
    let (mut store, model) = build_model(&cfg, 0)?;
    if tensors.len() != store.params().len() + store.buffers().len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            store.params().len() + store.buffers().len()
        )));
    }
    store.load_named(|name| tensors.remove(name))?;
    Ok((cfg, store, model))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, cfg, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore, Model)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
