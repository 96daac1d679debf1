//! Parameter storage, forward context and the small layer vocabulary the
//! model is assembled from.

mod layers;
mod params;

pub use layers::{
    map_to_tokens, tokens_to_map, BatchNorm, Conv2d, ConvSpec, FeedForward, LayerNorm, Linear,
    AFFINE_INIT_STD, FFN_EXPANSION,
};
pub use params::{BufferId, Ctx, Init, Mode, Named, ParamId, ParamStore, StepOutput};
