use super::*;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::rng::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape, |_| r.range(-1.0, 1.0))
}

/// `sum(y ⊙ R)` for a fixed random `R`, so every output position carries a distinct weight.
fn probe_loss(cx: &mut Ctx<'_>, y: Var) -> Result<Var> {
    let r = rand_tensor(cx.tape.shape(y), 991);
    let r = cx.input(r);
    let p = cx.tape.mul(y, r)?;
    cx.tape.sum(p)
}

fn check_exhaustive(
    inputs: Vec<(&str, Tensor)>,
    mode: Mode,
    mut f: impl FnMut(&mut Ctx<'_>, &[Var]) -> Result<Var>,
) -> GradCheckReport {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().map(|(n, t)| store.add(n, t)).collect();
    let opts = GradCheckOptions {
        entries_per_tensor: usize::MAX,
        ..Default::default()
    };
    grad_check(
        &mut store,
        mode,
        |cx| {
            let vars: Vec<Var> = ids.iter().map(|&id| cx.param(id)).collect();
            let y = f(cx, &vars)?;
            probe_loss(cx, y)
        },
        &opts,
    )
    .unwrap()
}

fn assert_passes(report: GradCheckReport) {
    assert!(report.passed(), "gradient check failed:\n{}", report.module_table(3));
}

#[test]
fn matmul_identity_and_small_product() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = t.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_tensor(&[5, 7], 1);
    let b = rand_tensor(&[7, 3], 2);
    let mut oracle = Tensor::zeros(&[5, 3]);
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..7 {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            oracle.set(&[i, j], s);
        }
    }
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let p = t.matmul(va, vb).unwrap();
    assert!(t.value(p).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn matmul_broadcasts_batch_axes() {
    let a = rand_tensor(&[2, 3, 4, 5], 3);
    let b = rand_tensor(&[5, 2], 4);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let p = t.matmul(va, vb).unwrap();
    assert_eq!(t.shape(p), &[2, 3, 4, 2]);
    let got = t.value(p);
    for x in 0..2 {
        for y in 0..3 {
            for i in 0..4 {
                for j in 0..2 {
                    let s: f64 = (0..5).map(|k| a.at(&[x, y, i, k]) * b.at(&[k, j])).sum();
                    assert!((got.at(&[x, y, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn matmul_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

fn conv_out(h: usize, k: usize, s: usize, d: usize) -> usize {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 1, h, h]));
    let w = t.constant(Tensor::zeros(&[1, 1, k, k]));
    let y = t.conv2d(x, w, s, d, 1).unwrap();
    t.shape(y)[2]
}

#[test]
fn conv_output_extent_examples() {
    assert_eq!(conv_out(56, 3, 2, 1), 28);
    assert_eq!(conv_out(56, 3, 1, 1), 56);
}

#[test]
fn conv_output_extent_lattice() {
    for k in [1, 3, 5, 7] {
        for s in [1, 2] {
            for d in 0..=3 {
                for h in [7, 8, 13, 16] {
                    let expected = (h + 2 * d - k) / s + 1;
                    assert_eq!(conv_out(h, k, s, d), expected, "k={k} s={s} d={d} h={h}");
                }
            }
        }
    }
}

#[test]
fn conv_matches_sliding_window() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.5 - 3.0);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let mut oracle = Tensor::zeros(&[1, 1, 2, 2]);
    for oy in 0..2 {
        for ox in 0..2 {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += x.at(&[0, 0, oy + dy, ox + dx]);
                }
            }
            oracle.set(&[0, 0, oy, ox], s);
        }
    }
    let mut t = Tape::new();
    let (vx, vw) = (t.constant(x), t.constant(w));
    let y = t.conv2d(vx, vw, 1, 0, 1).unwrap();
    assert!(t.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv_rejects_bad_groups_and_oversized_kernels() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = t.constant(Tensor::zeros(&[4, 1, 3, 3]));
    assert!(t.conv2d(x, w, 1, 1, 2).is_err());
    let w = t.constant(Tensor::zeros(&[1, 3, 7, 7]));
    assert!(t.conv2d(x, w, 1, 1, 1).is_err());
    assert!(t.conv2d(x, w, 1, 2, 1).is_ok());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax(x, 0).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let x = t.constant(rand_tensor(&[4], 5));
    let y = t.softmax(x, 0).unwrap();
    assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
    assert!(t.value(y).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn softmax_rows_are_stochastic_on_inner_axis() {
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[3, 5, 4], 6).map(|v| v * 30.0));
    let y = t.softmax(x, 1).unwrap();
    let s = t.sum_axis(y, 1).unwrap();
    for &v in t.value(s).data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.softmax(x, 1), Err(Error::InvalidAxis { .. })));
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1]));
    let s = t.activation(x, Activation::Sigmoid).unwrap();
    assert_eq!(t.value(s).item(), 0.5);
    let s = t.activation(x, Activation::Silu).unwrap();
    assert_eq!(t.value(s).item(), 0.0);
    let s = t.activation(x, Activation::Gelu).unwrap();
    assert_eq!(t.value(s).item(), 0.0);
}

#[test]
fn activation_gradients_match_finite_differences() {
    for kind in [Activation::Silu, Activation::Gelu, Activation::Sigmoid, Activation::Relu] {
        // keep relu probes away from the kink
        let x = rand_tensor(&[3, 4], 7).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v } * 3.0);
        let r = check_exhaustive(vec![("x", x)], Mode::Train, |cx, v| cx.tape.activation(v[0], kind));
        assert!(r.max_rel_err() < 1e-6, "{kind:?}: {}", r.max_rel_err());
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[2, 5], 3.25));
    let g = t.constant(Tensor::ones(&[5]));
    let b = t.constant(Tensor::zeros(&[5]));
    let y = t.layer_norm(x, g, b).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_moments() {
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[6, 16], 8).map(|v| 4.0 * v + 1.0));
    let g = t.constant(Tensor::ones(&[16]));
    let b = t.constant(Tensor::zeros(&[16]));
    let y = t.layer_norm(x, g, b).unwrap();
    for row in t.value(y).data().chunks(16) {
        let m: f64 = row.iter().sum::<f64>() / 16.0;
        let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_running_stats_match_direct_averages() {
    use crate::nn::{BatchNorm, Init};
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let bn = BatchNorm::new(&mut Init::new(&mut store, &mut rng), "bn", 3);
    let x = rand_tensor(&[4, 3, 2, 2], 9).map(|v| 2.0 * v + 0.5);
    for _ in 0..200 {
        let mut cx = Ctx::new(&store, Mode::Train);
        let v = cx.input(x.clone());
        bn.forward(&mut cx, v).unwrap();
        let updates = cx.into_stat_updates();
        store.apply_stat_updates(updates);
    }
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..4).map(move |s| (b, s)))
            .map(|(b, s)| x.at(&[b, c, s / 2, s % 2]))
            .collect();
        let m = vals.iter().sum::<f64>() / 16.0;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 15.0;
        assert!((store.buffer(bn.running_mean).data()[c] - m).abs() < 1e-8);
        assert!((store.buffer(bn.running_var).data()[c] - v).abs() < 1e-8);
    }
    // eval with converged running statistics reproduces train-mode output up to the
    // biased/unbiased variance factor
    let mut tr = Ctx::new(&store, Mode::Train);
    let v = tr.input(x.clone());
    let yt = bn.forward(&mut tr, v).unwrap();
    let mut ev = Ctx::new(&store, Mode::Eval);
    let v = ev.input(x.clone());
    let ye = bn.forward(&mut ev, v).unwrap();
    let ratio = (15.0f64 / 16.0).sqrt();
    for (a, b) in tr.value(yt).data().iter().zip(ev.value(ye).data()) {
        assert!((a * ratio - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn norm_gradients_match_finite_differences() {
    let x = rand_tensor(&[3, 5], 10);
    let r = check_exhaustive(
        vec![("x", x), ("g", rand_tensor(&[5], 11)), ("b", rand_tensor(&[5], 12))],
        Mode::Train,
        |cx, v| cx.tape.layer_norm(v[0], v[1], v[2]),
    );
    assert_passes(r);
    let x = rand_tensor(&[2, 3, 2, 2], 13);
    let r = check_exhaustive(
        vec![("x", x), ("g", rand_tensor(&[3], 14)), ("b", rand_tensor(&[3], 15))],
        Mode::Train,
        |cx, v| Ok(cx.tape.batch_norm(v[0], v[1], v[2], None)?.y),
    );
    assert_passes(r);
    let x = rand_tensor(&[2, 3, 2], 16);
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let r = check_exhaustive(
        vec![("x", x), ("g", rand_tensor(&[3], 17)), ("b", rand_tensor(&[3], 18))],
        Mode::Eval,
        |cx, v| Ok(cx.tape.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))?.y),
    );
    assert_passes(r);
}

#[test]
fn concat_split_round_trip() {
    let parts = [rand_tensor(&[2, 3, 2], 20), rand_tensor(&[2, 1, 2], 21), rand_tensor(&[2, 4, 2], 22)];
    let mut t = Tape::new();
    let vs: Vec<Var> = parts.iter().map(|p| t.constant(p.clone())).collect();
    let c = t.concat(&vs, 1).unwrap();
    assert_eq!(t.shape(c), &[2, 8, 2]);
    let back = t.split(c, 1, &[3, 1, 4]).unwrap();
    for (b, p) in back.iter().zip(&parts) {
        let got: Vec<u64> = t.value(*b).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }
    assert!(t.split(c, 1, &[3, 3]).is_err());
}

#[test]
fn mean_reduce_of_constant() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 2, 3, 5], 7.0));
    let m = t.mean_axis(x, 3).unwrap();
    assert_eq!(t.shape(m), &[1, 2, 3, 1]);
    assert!(t.value(m).data().iter().all(|&v| (v - 7.0).abs() < 1e-15));
}

#[test]
fn upsample_rearrange_matches_index_oracle() {
    let x = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.upsample_rearrange(v, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4, 4]);
    // out[0, c, 2h + i, 2w + j] = in[0, c·4 + 2i + j, h, w]
    for h in 0..2 {
        for w in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(t.value(y).at(&[0, 0, 2 * h + i, 2 * w + j]), x.at(&[0, 2 * i + j, h, w]));
                }
            }
        }
    }
    let bad = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(t.upsample_rearrange(bad, 2).is_err());
}

#[test]
fn backward_sum_and_square() {
    let x = rand_tensor(&[3, 2], 30);
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let s = t.sum(v).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    for (d, xv) in g.get(v).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * xv);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let v = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::ones(&[2]));
    let z = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.div(a, z), Err(Error::NonFinite { .. })));
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let a = rand_tensor(&[2, 3, 4], 40);
    let b = rand_tensor(&[3, 1], 41);
    assert_passes(check_exhaustive(vec![("a", a.clone()), ("b", b.clone())], Mode::Train, |cx, v| {
        let s = cx.tape.add(v[0], v[1])?;
        let m = cx.tape.mul(s, v[1])?;
        let d = cx.tape.sub(m, v[0])?;
        let q = cx.tape.add_scalar(v[1], 3.0)?;
        let d = cx.tape.div(d, q)?;
        cx.tape.scale(d, 0.7)
    }));
    assert_passes(check_exhaustive(
        vec![("a", rand_tensor(&[2, 3, 4], 42)), ("b", rand_tensor(&[4, 5], 43))],
        Mode::Train,
        |cx, v| cx.tape.matmul(v[0], v[1]),
    ));
    assert_passes(check_exhaustive(
        vec![("a", rand_tensor(&[2, 1, 3, 4], 44)), ("b", rand_tensor(&[3, 4, 2], 45))],
        Mode::Train,
        |cx, v| cx.tape.matmul(v[0], v[1]),
    ));
    for (stride, pad, groups, cin, cout, k) in [(1, 1, 1, 2, 3, 3), (2, 1, 1, 2, 2, 3), (1, 1, 4, 4, 4, 3), (2, 0, 2, 4, 2, 1)] {
        assert_passes(check_exhaustive(
            vec![
                ("x", rand_tensor(&[2, cin, 5, 5], 46)),
                ("w", rand_tensor(&[cout, cin / groups, k, k], 47)),
            ],
            Mode::Train,
            |cx, v| cx.tape.conv2d(v[0], v[1], stride, pad, groups),
        ));
    }
    assert_passes(check_exhaustive(vec![("x", rand_tensor(&[2, 3, 4], 48))], Mode::Train, |cx, v| {
        let s = cx.tape.softmax(v[0], 1)?;
        let l = cx.tape.log_softmax(v[0], 2)?;
        cx.tape.add(s, l)
    }));
    assert_passes(check_exhaustive(vec![("x", rand_tensor(&[2, 3, 4], 49))], Mode::Train, |cx, v| {
        let p = cx.tape.permute(v[0], &[2, 0, 1])?;
        let r = cx.tape.reshape(p, &[4, 6])?;
        let parts = cx.tape.split(r, 1, &[2, 4])?;
        let c = cx.tape.concat(&[parts[1], parts[0], parts[1]], 1)?;
        let m = cx.tape.mean_axis(c, 0)?;
        let s = cx.tape.sum_axis(c, 1)?;
        let t = cx.tape.matmul(s, m)?;
        let t = cx.tape.transpose(t)?;
        let u = cx.tape.mean(c)?;
        cx.tape.mul(t, u)
    }));
    assert_passes(check_exhaustive(vec![("x", rand_tensor(&[1, 8, 2, 3], 50))], Mode::Train, |cx, v| {
        cx.tape.upsample_rearrange(v[0], 2)
    }));
}

#[test]
fn constant_function_has_zero_gradients() {
    let mut store = ParamStore::new();
    let id = store.add("unused", rand_tensor(&[3], 60));
    let report = grad_check(
        &mut store,
        Mode::Train,
        |cx| {
            let _ = cx.param(id);
            let c = cx.input(Tensor::scalar(4.0));
            Ok(c)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed());
    let mut cx = Ctx::new(&store, Mode::Train);
    let v = cx.param(id);
    let c = cx.input(Tensor::scalar(4.0));
    let s = cx.tape.sum(v).unwrap();
    let z = cx.tape.scale(s, 0.0).unwrap();
    let l = cx.tape.add(z, c).unwrap();
    let out = cx.backward(l).unwrap();
    assert!(out.grads[0].as_ref().unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn linear_layer_passes_tight_tolerance() {
    use crate::nn::{Init, Linear};
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3);
    let lin = Linear::new(&mut Init::new(&mut store, &mut rng), "lin", 4, 3);
    let x = rand_tensor(&[2, 5, 4], 61);
    let opts = GradCheckOptions {
        tol: 1e-6,
        entries_per_tensor: usize::MAX,
        ..Default::default()
    };
    let report = grad_check(
        &mut store,
        Mode::Train,
        |cx| {
            let v = cx.input(x.clone());
            let y = lin.forward(cx, v)?;
            let y = cx.tape.activation(y, Activation::Gelu)?;
            probe_loss(cx, y)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.module_table(2));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&[2, 3, 6, 6], 70));
        let w = t.constant(rand_tensor(&[4, 3, 3, 3], 71));
        let y = t.conv2d(x, w, 2, 1, 1).unwrap();
        let y = t.softmax(y, 1).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
