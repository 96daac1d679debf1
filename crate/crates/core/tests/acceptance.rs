//! Acceptance suite. Every criterion runs in sequence (they share one core
//! and several are timed) and reports one line; the test fails if any does.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use anyhow::{ensure, Result};
use transception::attention::{AttentionKind, AttentionParams, ChannelAwareAttention, TokenAwareAttention};
use transception::bridge::{flatten_concat, restore, Bridge, BridgeConfig};
use transception::config::RunConfig;
use transception::encoder::{stage_shapes, Ripm, StageFeatures};
use transception::harness::{cmd_bench, cmd_gradcheck, cmd_shapes, cmd_train, BENCH_DIM, BENCH_TOKENS};
use transception::metrics::{dice_score, hd95, se_sp_acc};
use transception::model::{ModelConfig, Scale, Variant};
use transception::nn::{Ctx, Init, Linear, Mode, ParamStore};
use transception::{Rng, Tensor, Var};

fn say(line: &str) {
    // Written to the process stdout directly so it shows without --nocapture.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn criterion(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Result<String>) {
    let start = Instant::now();
    let (ok, detail) = match f() {
        Ok(d) => (true, d),
        Err(e) => (false, format!("{e:#}")),
    };
    let tag = if ok { "PASS" } else { "FAIL" };
    say(&format!("[{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64()));
    results.push(ok);
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
}

fn eval1(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> transception::Result<Var>) -> Tensor {
    let mut cx = Ctx::inference(store, Mode::Eval);
    let v = cx.input(x.clone());
    let y = f(&mut cx, v).unwrap();
    cx.value(y).clone()
}

/// `x W + b` over the last axis, straight from the stored tensors.
fn linear_oracle(store: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    let (w, b) = (store.get(l.w), l.b.map(|b| store.get(b)));
    let s = x.shape();
    let (rows, din, dout) = (s[..s.len() - 1].iter().product::<usize>(), l.in_dim, l.out_dim);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = acc;
        }
    }
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out).unwrap()
}

/// Per-head `softmax(q kᵀ / √d) v`.
fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (b, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = c / heads;
    let mut out = Tensor::zeros(&[b, n, c]);
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|e| q.at(&[bi, i, h * d + e]) * k.at(&[bi, j, h * d + e])).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..d {
                    out.set(&[bi, i, h * d + e], (0..n).map(|j| ex[j] / z * v.at(&[bi, j, h * d + e])).sum());
                }
            }
        }
    }
    out
}

fn gradient_integrity() -> Result<String> {
    let start = Instant::now();
    let runs = cmd_gradcheck(&Variant::ALL, 0, 1e-4)?;
    let secs = start.elapsed().as_secs_f64();
    let summary: Vec<String> = runs
        .iter()
        .map(|r| format!("{} {:.1e}", r.variant, r.report.max_rel_err()))
        .collect();
    for r in &runs {
        ensure!(r.report.passed(), "{} fails:\n{}", r.variant, r.report.module_table(3));
    }
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(format!("max rel err {}; {secs:.0}s", summary.join(", ")))
}

fn shape_fidelity() -> Result<String> {
    let desk = cmd_shapes(&ModelConfig::desk(Variant::Full), 32, 0)?;
    ensure!(desk.passed(), "desk trace:\n{}", desk.render());
    let full = cmd_shapes(&ModelConfig::preset(Scale::Full, Variant::Full), 224, 0)?;
    ensure!(full.passed(), "full trace:\n{}", full.render());
    // Written out independently of the stage arithmetic.
    let table = [
        ("encoder.y1", [1, 64, 56, 56]),
        ("encoder.y2", [1, 128, 28, 28]),
        ("encoder.y3", [1, 320, 14, 14]),
        ("encoder.y4", [1, 512, 7, 7]),
        ("logits", [1, 9, 224, 224]),
    ];
    for (name, shape) in table {
        let row = full.rows.iter().find(|r| r.name == name).expect("traced");
        ensure!(row.got == shape, "{name}: {:?} vs {shape:?}", row.got);
    }
    ensure!(
        cmd_shapes(&ModelConfig::desk(Variant::Full), 40, 0).is_err(),
        "indivisible input accepted"
    );
    Ok(format!("{} rows at 32, {} rows at 224 match", desk.rows.len(), full.rows.len()))
}

fn attention_oracles() -> Result<String> {
    let mut worst_dense: f64 = 0.0;
    for (n, c, heads, seed) in [(16, 8, 1, 1), (64, 8, 2, 2), (256, 16, 1, 3)] {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let ta = TokenAwareAttention::new(&mut Init::new(&mut store, &mut rng), "ta", AttentionParams::new(c, heads))?;
        let x = rand_tensor(&[2, n, c], &mut rng);
        let y = eval1(&store, &x, |cx, v| ta.forward(cx, v));
        let (q, k, v) = (
            linear_oracle(&store, &ta.q, &x),
            linear_oracle(&store, &ta.k, &x),
            linear_oracle(&store, &ta.v, &x),
        );
        let oracle = linear_oracle(&store, &ta.proj, &dense_attention(&q, &k, &v, heads));
        worst_dense = worst_dense.max(y.max_abs_diff(&oracle));
    }
    ensure!(worst_dense < 1e-10, "token-aware vs dense: {worst_dense:e}");

    let mut worst_assoc: f64 = 0.0;
    for (n, c, seed) in [(32, 16, 4), (200, 8, 5)] {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let ca = ChannelAwareAttention::new(&mut Init::new(&mut store, &mut rng), "ca", AttentionParams::channel_aware(c))?;
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let x = cx.input(rand_tensor(&[1, n, c], &mut rng));
        let p = ca.forward_parts(&mut cx, x)?;
        let (rq, rk, v, att) = (cx.value(p.rho_q), cx.value(p.rho_k), cx.value(p.v), cx.value(p.attended));
        let dk = rq.shape()[3];
        // Token-first order: (ρ_q ρ_kᵀ) V.
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|e| rq.at(&[0, 0, i, e]) * rk.at(&[0, 0, j, e])).sum())
                .collect();
            for e in 0..c {
                let s: f64 = (0..n).map(|j| row[j] * v.at(&[0, 0, j, e])).sum();
                worst_assoc = worst_assoc.max((s - att.at(&[0, i, e])).abs());
            }
        }
    }
    ensure!(worst_assoc < 1e-10, "channel-aware orders differ by {worst_assoc:e}");
    Ok(format!("dense diff {worst_dense:.1e}, associativity diff {worst_assoc:.1e}"))
}

fn complexity_scaling() -> Result<String> {
    let start = Instant::now();
    let kinds = [AttentionKind::Factorized, AttentionKind::ChannelAware, AttentionKind::TokenAware];
    let r = cmd_bench(&kinds, &BENCH_TOKENS, BENCH_DIM, 0)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(r.slopes_pass(), "{}", r.render());
    ensure!(r.reduction_passes(), "{}", r.render());
    ensure!(secs < 120.0, "took {secs:.0}s");
    let slopes: Vec<String> = r.slopes.iter().map(|(k, s)| format!("{k} {s:.3}")).collect();
    Ok(format!(
        "slopes {}; r=2/r=1 flops {:.3}",
        slopes.join(", "),
        r.reduction_ratio.unwrap_or(f64::NAN)
    ))
}

fn serial_inception() -> Result<String> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(6);
    let ripm = Ripm::new(&mut Init::new(&mut store, &mut rng), "ripm", 3, 8, 3);
    let serial = ripm.kernel_params_per_channel_pair();
    // One independent k×k kernel per branch, k = 3, 5, 7.
    let parallel: usize = [3usize, 5, 7].iter().map(|k| k * k).sum();
    ensure!(serial == 27 && parallel == 83, "serial {serial}, parallel {parallel}");
    let mut sizes = Vec::new();
    for h in (32..=224).step_by(32) {
        let x = rand_tensor(&[1, 3, h, h], &mut rng);
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let v = cx.input(x);
        let outs = ripm.forward(&mut cx, v)?;
        ensure!(outs.len() == 3, "{} branches", outs.len());
        for o in &outs {
            ensure!(cx.shape(*o) == vec![1, 8, h / 2, h / 2], "input {h}: {:?}", cx.shape(*o));
        }
        sizes.push(h);
    }
    Ok(format!("27 vs 83 kernel weights per channel pair; equal branch shapes for {sizes:?}"))
}

fn brute_hd95(a: &[u8], b: &[u8], h: usize, w: usize) -> Option<f64> {
    let edge = |m: &[u8]| -> Vec<(i64, i64)> {
        let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize] == 1;
        (0..h as i64)
            .flat_map(|y| (0..w as i64).map(move |x| (y, x)))
            .filter(|&(y, x)| inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)))
            .collect()
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() || eb.is_empty() {
        return None;
    }
    let mut d = Vec::new();
    for (from, to) in [(&ea, &eb), (&eb, &ea)] {
        for p in from {
            d.push(to.iter().map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min));
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(d[lo] + (d[hi] - d[lo]) * (pos - lo as f64))
}

fn metric_oracles() -> Result<String> {
    let mut rng = Rng::new(7);
    let mut defined = 0;
    for case in 0..200 {
        let (h, w) = (1 + rng.below(32), 1 + rng.below(32));
        let density = rng.range(0.05, 0.9);
        let mut mask = || -> Vec<u8> { (0..h * w).map(|_| u8::from(rng.uniform() < density)).collect() };
        let (mut a, b) = (mask(), mask());
        if case % 20 == 0 {
            a.fill(0);
        }
        let got = hd95(&a, &b, h, w, 1)?;
        let want = brute_hd95(&a, &b, h, w);
        ensure!(got == want, "case {case} ({h}x{w}): {got:?} vs {want:?}");
        defined += usize::from(got.is_some());

        let sa: HashSet<usize> = (0..h * w).filter(|&i| a[i] == 1).collect();
        let sb: HashSet<usize> = (0..h * w).filter(|&i| b[i] == 1).collect();
        let inter = sa.intersection(&sb).count();
        let dice = if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * inter as f64 / (sa.len() + sb.len()) as f64
        };
        ensure!(dice_score(&a, &b, 1)? == dice, "dice case {case}");

        let r = se_sp_acc(&a, &b)?;
        let n = (h * w) as f64;
        let (tp, p_true) = (inter as f64, sb.len() as f64);
        let tn = (0..h * w).filter(|&i| a[i] == 0 && b[i] == 0).count() as f64;
        let neg_true = n - p_true;
        ensure!(r.se == (p_true > 0.0).then(|| tp / p_true), "SE case {case}");
        ensure!(r.sp == (neg_true > 0.0).then(|| tn / neg_true), "SP case {case}");
        ensure!(r.acc == (tp + tn) / n, "ACC case {case}");
    }
    Ok(format!("200 random pairs up to 32x32 exact ({defined} with defined hd95)"))
}

fn desk_overfit() -> Result<String> {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let cfg = RunConfig {
        out: dirs[0].path().to_path_buf(),
        ..RunConfig::default()
    };
    ensure!(cfg.model.variant == Variant::Full && cfg.model.encoder.base_dim == 8, "default recipe changed");
    ensure!(cfg.samples == 16 && cfg.model.image_size == 32 && cfg.steps <= 500, "default recipe changed");
    let first = cmd_train(&cfg, |_| {})?;
    let second = cmd_train(&RunConfig { out: dirs[1].path().to_path_buf(), ..cfg.clone() }, |_| {})?;
    let csv = |d: &tempfile::TempDir| std::fs::read(d.path().join(transception::harness::LOSS_FILE));
    ensure!(csv(&dirs[0])? == csv(&dirs[1])?, "loss CSVs differ between runs");
    ensure!(first.report.mean_dice == second.report.mean_dice, "reports differ between runs");
    let dice = first.report.mean_dice;
    ensure!(first.seconds < 600.0, "took {:.0}s", first.seconds);
    ensure!(dice >= 0.95, "mean Dice {dice:.4}");
    Ok(format!(
        "mean Dice {dice:.4} after {} steps in {:.0}s; loss CSV identical across two runs",
        cfg.steps, first.seconds
    ))
}

/// The fixed protocol for the ordering check: Adam with a poly schedule,
/// augmentation, 160 training and 40 held-out samples.
fn ablation_config(variant: Variant, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.set_variant(variant);
    cfg.out = out.to_path_buf();
    cfg.samples = 200;
    cfg.holdout = 40;
    cfg.steps = 400;
    cfg.optimizer = "adam".into();
    cfg.schedule = "poly".parse().unwrap();
    cfg.lr = 1e-3;
    cfg.min_lr = 0.0;
    cfg.augment = true;
    cfg
}

fn ablation_ordering() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut dice = Vec::new();
    for v in [Variant::EffFormer, Variant::Rmi, Variant::Full] {
        let cfg = ablation_config(v, &dir.path().join(v.to_string()));
        dice.push(cmd_train(&cfg, |_| {})?.report.mean_dice);
    }
    let (eff, rmi, full) = (dice[0], dice[1], dice[2]);
    let strict = full >= rmi && rmi >= eff;
    let detail = format!(
        "held-out mean Dice effformer {eff:.4}, rmi {rmi:.4}, full {full:.4}; strict order {}",
        if strict { "holds" } else { "does not hold" }
    );
    ensure!(full >= rmi - 0.02 && rmi >= eff - 0.02, "{detail}");
    Ok(detail)
}

fn bridge_round_trip() -> Result<String> {
    let mut rng = Rng::new(8);
    let mut checked = 0;
    for (c, hw, b) in [(8, 32, 2), (4, 64, 1), (64, 224, 1)] {
        let maps: Vec<Tensor> = stage_shapes(c, hw, hw)
            .iter()
            .map(|&[ch, h, w]| rand_tensor(&[b, ch, h, w], &mut rng))
            .collect();
        let store = ParamStore::new();
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let vars: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
        let seq = flatten_concat(&mut cx, &vars, c)?;
        let back = restore(&mut cx, &seq, seq.tokens)?;
        for (m, v) in maps.iter().zip(back) {
            ensure!(cx.value(v) == m, "round trip differs at C={c}, {hw}x{hw}");
            checked += 1;
        }
    }

    let dims = [8, 16, 40, 64];
    let shapes = stage_shapes(8, 32, 32);
    for arr in ["cttt", "tttt", "ctct", "cccc"] {
        let cfg = BridgeConfig {
            arrangement: arr.parse()?,
            ..BridgeConfig::desk()
        };
        let mut store = ParamStore::new();
        let mut init_rng = Rng::new(9);
        let bridge = Bridge::new(&mut Init::new(&mut store, &mut init_rng), "bridge", cfg, &dims)?;
        store.zero_prefix("bridge");
        let maps: Vec<Tensor> = shapes.iter().map(|&[ch, h, w]| rand_tensor(&[2, ch, h, w], &mut rng)).collect();
        let mut cx = Ctx::inference(&store, Mode::Eval);
        let v: Vec<Var> = maps.iter().map(|m| cx.input(m.clone())).collect();
        let out = bridge.forward(&mut cx, &StageFeatures([v[0], v[1], v[2], v[3]]))?;
        for (m, o) in maps.iter().zip(out.0) {
            ensure!(cx.value(o) == m, "zero-weight bridge {arr} is not an identity");
        }
    }

    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(10);
    let stack = transception::attention::TransformerStack::new(
        &mut Init::new(&mut store, &mut init_rng),
        "stack",
        2,
        AttentionParams::new(8, 2),
        true,
    )?;
    store.zero_prefix("stack");
    let x = rand_tensor(&[2, 12, 8], &mut rng);
    let y = eval1(&store, &x, |cx, v| stack.forward(cx, v, (3, 4)));
    ensure!(y == x, "zero-weight transformer stack is not an identity");
    Ok(format!("{checked} stage maps restored bitwise; zero-weight bridges (4 arrangements) and transformer blocks exact identities"))
}

#[test]
fn primary_acceptance_criteria() {
    let mut results = Vec::new();
    criterion(&mut results, "gradient integrity", gradient_integrity);
    criterion(&mut results, "shape fidelity", shape_fidelity);
    criterion(&mut results, "attention oracles", attention_oracles);
    criterion(&mut results, "complexity scaling", complexity_scaling);
    criterion(&mut results, "serial inception factorization", serial_inception);
    criterion(&mut results, "metric oracles", metric_oracles);
    criterion(&mut results, "desk overfit", desk_overfit);
    criterion(&mut results, "ablation ordering", ablation_ordering);
    criterion(&mut results, "bridge round trip", bridge_round_trip);
    let passed = results.iter().filter(|&&r| r).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
