//! Run the cross-stage bridge in each layer arrangement on desk-sized
//! features and show how far it moves them from the input.
//!
//! cargo run --release --example bridge_arrangements

use anyhow::Result;
use transception::bridge::{flatten_concat, Bridge, BridgeConfig};
use transception::encoder::{stage_shapes, StageFeatures};
use transception::nn::{Ctx, Init, Mode, ParamStore};
use transception::{Rng, Tensor};

fn main() -> Result<()> {
    let dims = [8, 16, 40, 64];
    let mut rng = Rng::new(0);
    let maps: Vec<Tensor> = stage_shapes(8, 32, 32)
        .iter()
        .map(|&[c, h, w]| Tensor::from_fn(&[1, c, h, w], |_| rng.range(-1.0, 1.0)))
        .collect();
    for arr in ["cttt", "tttt", "ctct", "cccc", "para"] {
        let cfg = BridgeConfig {
            arrangement: arr.parse()?,
            ..BridgeConfig::desk()
        };
        let mut store = ParamStore::new();
        let mut init_rng = Rng::new(1);
        let bridge = Bridge::new(&mut Init::new(&mut store, &mut init_rng), "bridge", cfg, &dims)?;
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let v: Vec<_> = maps.iter().map(|m| cx.input(m.clone())).collect();
        let tokens = flatten_concat(&mut cx, &v, dims[0])?.total();
        let out = bridge.forward(&mut cx, &StageFeatures([v[0], v[1], v[2], v[3]]))?;
        let shift: Vec<String> = maps
            .iter()
            .zip(out.0)
            .map(|(m, o)| format!("{:.3}", cx.value(o).max_abs_diff(m)))
            .collect();
        println!("{arr}: {tokens} tokens, {} params, max change per stage {}", store.count(), shift.join(" "));
    }
    Ok(())
}
