use super::*;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tensor;
use crate::testutil::{build, probe_loss, rand_tensor, set_params};

fn stage_maps(b: usize, shapes: &[[usize; 3]], seed: u64) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &[c, h, w])| rand_tensor(&[b, c, h, w], seed + i as u64))
        .collect()
}

fn desk_shapes(c: usize, hw: usize) -> Vec<[usize; 3]> {
    crate::encoder::stage_shapes(c, hw, hw).to_vec()
}

#[test]
fn arrangement_parsing() {
    assert_eq!("para".parse::<Arrangement>().unwrap(), Arrangement::Parallel);
    for s in ["cttt", "tttt", "ctct", "cccc"] {
        assert_eq!(s.parse::<Arrangement>().unwrap().to_string(), s);
    }
    for bad in ["ctt", "ctttt", "cxtt", "", "PARA"] {
        assert!(matches!(bad.parse::<Arrangement>(), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn segment_lengths_follow_stage_volumes() {
    assert_eq!(segment_lengths(&desk_shapes(8, 32), 8).unwrap(), vec![64, 32, 20, 8]);
    let full = segment_lengths(&desk_shapes(64, 224), 64).unwrap();
    assert_eq!(full, vec![3136, 1568, 980, 392]);
    assert_eq!(full.iter().sum::<usize>(), 6076);
    assert!(segment_lengths(&[[3, 1, 1]], 2).is_err());
}

#[test]
fn flatten_then_restore_is_bitwise_identity() {
    for (c, hw, b) in [(8, 32, 2), (4, 64, 1), (64, 224, 1)] {
        let shapes = desk_shapes(c, hw);
        let maps = stage_maps(b, &shapes, 1);
        let store = ParamStore::new();
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
        let seq = flatten_concat(&mut cx, &vars, c).unwrap();
        assert_eq!(cx.shape(seq.tokens), vec![b, seq.total(), c]);
        let back = restore(&mut cx, &seq, seq.tokens).unwrap();
        for (m, v) in maps.iter().zip(back) {
            assert_eq!(cx.value(v), m);
        }
    }
}

#[test]
fn flatten_uses_channels_last_order() {
    let store = ParamStore::new();
    let mut cx = Ctx::inference(&store, Mode::Eval);
    let m = Tensor::from_fn(&[1, 4, 1, 2], |i| i as f64);
    let v = cx.input(m);
    let seq = flatten_concat(&mut cx, &[v], 2).unwrap();
    // Pixel 0 carries channels (0, 2, 4, 6) of the map, pixel 1 carries (1, 3, 5, 7).
    assert_eq!(cx.value(seq.tokens).data(), &[0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
    assert_eq!(seq.segment_lengths, vec![4]);
}

fn manual_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

fn run_module(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> Result<Var>) -> Tensor {
    let mut cx = Ctx::inference(store, Mode::Eval);
    let v = cx.input(x.clone());
    let y = f(&mut cx, v).unwrap();
    cx.value(y).clone()
}

/// One bridge layer composed by hand: a stage's segment of the flat
/// sequence is exactly its channels-last pixel list.
fn oracle_layer(
    store: &ParamStore,
    layer: &BridgeLayer,
    segments: &[usize],
    stage_dims: &[usize],
    x: &Tensor,
    attention: impl Fn(&Tensor) -> Tensor,
) -> Tensor {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = manual_layer_norm(x, store.get(layer.norm1.gamma), store.get(layer.norm1.beta));
    let a = attention(&h);
    let s = Tensor::from_fn(x.shape(), |i| x.data()[i] + a.data()[i]);
    let h2 = manual_layer_norm(&s, store.get(layer.norm2.gamma), store.get(layer.norm2.beta));
    let mut out = s.clone();
    let mut start = 0;
    for (seg, (&len, &dim)) in segments.iter().zip(stage_dims).enumerate() {
        let pixels = len * c / dim;
        let mut tokens = Vec::new();
        for bi in 0..b {
            let base = (bi * n + start) * c;
            tokens.extend_from_slice(&h2.data()[base..base + len * c]);
        }
        let t = Tensor::new(&[b, pixels, dim], tokens).unwrap();
        let f = run_module(store, &t, |cx, v| layer.ffn.ffns[seg].forward(cx, v));
        for bi in 0..b {
            let base = (bi * n + start) * c;
            for j in 0..len * c {
                out.data_mut()[base + j] += f.data()[bi * len * c + j];
            }
        }
        start += len;
    }
    out
}

fn run_layer(store: &ParamStore, layer: &BridgeLayer, maps: &[Tensor], dim: usize) -> (Tensor, Tensor, Vec<usize>) {
    let mut cx = Ctx::inference(store, Mode::Eval);
    let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
    let seq = flatten_concat(&mut cx, &vars, dim).unwrap();
    let y = layer.forward(&mut cx, &seq, seq.tokens).unwrap();
    (cx.value(seq.tokens).clone(), cx.value(y).clone(), seq.segment_lengths.clone())
}

#[test]
fn channel_layer_matches_hand_composition_on_two_stages() {
    let dims = [4, 8];
    let (store, layer) = build(3, |i| BridgeLayer::new(i, "l", LayerKind::Channel, 4, &dims, 1).unwrap());
    let maps = stage_maps(2, &[[4, 2, 2], [8, 1, 1]], 4);
    let (x, y, segs) = run_layer(&store, &layer, &maps, 4);
    assert_eq!(segs, vec![4, 2]);
    let BridgeAttention::Channel(attn) = &layer.attn else { unreachable!() };
    let oracle = oracle_layer(&store, &layer, &segs, &dims, &x, |h| run_module(&store, h, |cx, v| attn.forward(cx, v)));
    assert!(y.max_abs_diff(&oracle) < 1e-12, "{}", y.max_abs_diff(&oracle));
}

/// Dense single-head attention on plain arrays, including the projections.
fn dense_token_attention(store: &ParamStore, a: &TokenAwareAttention, h: &Tensor) -> Tensor {
    let lin = |l: &Linear, x: &Tensor| {
        let (w, bias) = (store.get(l.w), store.get(l.b.unwrap()));
        let (rows, din, dout) = (x.numel() / l.in_dim, l.in_dim, l.out_dim);
        let mut out = Tensor::zeros(&[x.shape()[0], x.shape()[1], dout]);
        for r in 0..rows {
            for o in 0..dout {
                let s: f64 = (0..din).map(|k| x.data()[r * din + k] * w.data()[k * dout + o]).sum();
                out.data_mut()[r * dout + o] = s + bias.data()[o];
            }
        }
        out
    };
    let (q, k, v) = (lin(&a.q, h), lin(&a.k, h), lin(&a.v, h));
    let (b, n, c) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut att = Tensor::zeros(&[b, n, c]);
    for bi in 0..b {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|e| q.at(&[bi, i, e]) * k.at(&[bi, j, e])).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for e in 0..c {
                let s: f64 = (0..n).map(|j| (scores[j] - m).exp() / z * v.at(&[bi, j, e])).sum();
                att.set(&[bi, i, e], s);
            }
        }
    }
    lin(&a.proj, &att)
}

#[test]
fn token_arrangement_without_reduction_matches_dense_layers() {
    let dims = [4, 8, 20, 32];
    let shapes = desk_shapes(4, 32);
    let cfg = BridgeConfig {
        arrangement: "tttt".parse().unwrap(),
        reduction: 1,
        final_ffn: false,
    };
    let (store, bridge) = build(5, |i| Bridge::new(i, "bridge", cfg, &dims).unwrap());
    let maps = stage_maps(1, &shapes, 6);
    let mut cx = Ctx::inference(&store, Mode::Eval);
    let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
    let seq = flatten_concat(&mut cx, &vars, 4).unwrap();
    let y = bridge.forward_tokens(&mut cx, &seq).unwrap();
    let mut x = cx.value(seq.tokens).clone();
    for layer in &bridge.layers {
        let BridgeAttention::Token(attn) = &layer.attn else { unreachable!() };
        x = oracle_layer(&store, layer, &seq.segment_lengths, &dims, &x, |h| dense_token_attention(&store, attn, h));
    }
    let diff = cx.value(y).max_abs_diff(&x);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn zero_weight_bridges_are_identities() {
    let dims = [4, 8, 20, 32];
    let shapes = desk_shapes(4, 32);
    for arr in ["cttt", "tttt", "ctct", "cccc"] {
        for final_ffn in [true, false] {
            let cfg = BridgeConfig {
                arrangement: arr.parse().unwrap(),
                reduction: 2,
                final_ffn,
            };
            let (mut store, bridge) = build(7, |i| Bridge::new(i, "bridge", cfg, &dims).unwrap());
            set_params(&mut store, "bridge", |name, s| {
                if name.contains("norm") {
                    rand_tensor(s, 8)
                } else {
                    Tensor::zeros(s)
                }
            });
            let maps = stage_maps(2, &shapes, 9);
            let mut cx = Ctx::inference(&store, Mode::Eval);
            let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
            let out = bridge
                .forward(&mut cx, &StageFeatures([vars[0], vars[1], vars[2], vars[3]]))
                .unwrap();
            for (m, v) in maps.iter().zip(out.0) {
                assert_eq!(cx.value(v), m, "{arr}");
            }
        }
    }
}

#[test]
fn every_arrangement_preserves_shapes() {
    let dims = [8, 16, 40, 64];
    let shapes = desk_shapes(8, 32);
    for arr in ["cttt", "tttt", "ctct", "para"] {
        let cfg = BridgeConfig {
            arrangement: arr.parse().unwrap(),
            ..BridgeConfig::desk()
        };
        let (store, bridge) = build(10, |i| Bridge::new(i, "bridge", cfg, &dims).unwrap());
        assert_eq!(bridge.merge.is_some(), arr == "para");
        if let Some(m) = &bridge.merge {
            assert_eq!((m.in_dim, m.out_dim), (16, 8));
        }
        let maps = stage_maps(2, &shapes, 11);
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
        let seq = flatten_concat(&mut cx, &vars, 8).unwrap();
        for layer in &bridge.layers {
            let y = layer.forward(&mut cx, &seq, seq.tokens).unwrap();
            assert_eq!(cx.shape(y), vec![2, 124, 8]);
        }
        let out = bridge
            .forward(&mut cx, &StageFeatures([vars[0], vars[1], vars[2], vars[3]]))
            .unwrap();
        for (m, v) in maps.iter().zip(out.0) {
            assert_eq!(cx.shape(v), m.shape());
            assert!(cx.value(v).all_finite());
        }
    }
}

#[test]
fn token_layers_reject_indivisible_sequences() {
    let dims = [8, 16, 40, 64];
    let cfg = BridgeConfig {
        reduction: 3,
        ..BridgeConfig::desk()
    };
    let (_, bridge) = build(12, |i| Bridge::new(i, "bridge", cfg, &dims).unwrap());
    assert!(bridge.check_tokens(124).is_err());
    assert!(bridge.check_tokens(123).is_ok());
    let cccc = BridgeConfig {
        arrangement: "cccc".parse().unwrap(),
        reduction: 3,
        final_ffn: true,
    };
    let (_, bridge) = build(12, |i| Bridge::new(i, "bridge", cccc, &dims).unwrap());
    assert!(bridge.check_tokens(124).is_ok());
}

#[test]
fn dual_bridge_gradients() {
    let dims = [4, 8, 20, 32];
    let shapes = desk_shapes(4, 32);
    let (mut store, bridge) = build(13, |i| Bridge::new(i, "bridge", BridgeConfig::desk(), &dims).unwrap());
    let maps = stage_maps(1, &shapes, 14);
    let report = grad_check(
        &mut store,
        Mode::Train,
        |cx| {
            let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
            let out = bridge.forward(cx, &StageFeatures([vars[0], vars[1], vars[2], vars[3]]))?;
            let seq = flatten_concat(cx, &out.0, 4)?;
            probe_loss(cx, seq.tokens)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.module_table(3));
}
