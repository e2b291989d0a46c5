mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realgin::ctx::{Ctx, Mode};
use realgin::garan::*;
use realgin::params::Params;
use realgin::ModelConfig;
use rgin_tensor::{Tape, Tensor};

fn cfg(heads: usize, m: usize, n: usize, da: usize) -> ModelConfig {
    ModelConfig {
        heads,
        channels: m,
        hidden: n,
        att_dim: da,
        ..ModelConfig::default()
    }
}

/// Random GARAN parameters plus unit batch-norm buffers.
fn garan_params(cfg: &ModelConfig, seed: u64) -> (Params<f64>, Params<f64>) {
    let (m, n, da) = (cfg.channels, cfg.hidden, cfg.att_dim);
    let c = m / cfg.heads;
    let mut p = Params::new();
    let mut k = seed;
    let mut next = || {
        k += 1;
        k
    };
    for j in 0..cfg.heads {
        for (kind, rows) in [("va", c), ("ta", n), ("vd", c), ("td", n)] {
            p.insert(
                format!("garan.h{j}.{kind}"),
                random(&[rows, da], next(), 0.8),
            );
        }
    }
    p.insert("garan.out.w", random(&[m, m], next(), 0.5));
    p.insert("garan.out.bn.gamma", Tensor::full(vec![m], 1.0));
    p.insert("garan.out.bn.beta", Tensor::zeros(vec![m]));
    let mut b = Params::new();
    b.insert("garan.out.bn.mean", Tensor::zeros(vec![m]));
    b.insert("garan.out.bn.var", Tensor::full(vec![m], 1.0));
    (p, b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x: [in]` times row-major `w: [in, out]`.
fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out)
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * w.data()[i * out + j])
                .sum()
        })
        .collect()
}

/// Scalar-loop collect logits for one sample: anchors `f: [s][c]`, text `ft: [n]`.
fn oracle_logits(f: &[Vec<f64>], ft: &[f64], wv: &Tensor<f64>, wt: &Tensor<f64>) -> Vec<f64> {
    let t: Vec<f64> = vecmat(ft, wt).into_iter().map(leaky).collect();
    f.iter()
        .map(|fi| {
            let v: Vec<f64> = vecmat(fi, wv).into_iter().map(leaky).collect();
            dot(&v, &t)
        })
        .collect()
}

fn oracle_softmax(e: &[f64]) -> Vec<f64> {
    let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
    e.iter().map(|v| (v - mx).exp() / z).collect()
}

#[test]
fn logits_match_hand_computation() {
    // 2 anchors, c = 2, n = 2, d_a = 2
    let wv = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let wt = t(&[2, 2], &[2.0, 0.0, 0.0, -1.0]);
    let p = params(vec![("v", wv), ("t", wt)]);
    let c = ModelConfig::default();
    let e = with_ctx(&p, &Params::new(), &c, Mode::Eval, |ctx| {
        let f_h = ctx.tape.constant(t(&[1, 2, 2], &[1.0, 2.0, -1.0, 3.0]));
        let f_t = ctx.tape.constant(t(&[1, 2], &[0.5, -2.0]));
        let e = collect_logits(ctx, f_h, f_t, "v", "t").unwrap();
        ctx.tape.value(e).data().to_vec()
    });
    // text side: leaky([1, 2]) = [1, 2]
    // anchor 0: leaky([1, 2]) · [1, 2] = 5; anchor 1: leaky([-1, 3]) = [-0.1, 3] → 5.9
    assert_close(&e, &[5.0, 5.9], 1e-12);
}

#[test]
fn zero_text_gives_uniform_attention() {
    let c = cfg(1, 4, 3, 2);
    let (p, b) = garan_params(&c, 1);
    with_ctx(&p, &b, &c, Mode::Eval, |ctx| {
        let f_h = ctx.tape.constant(random(&[2, 9, 4], 2, 1.0));
        let f_t = ctx.tape.constant(Tensor::zeros(vec![2, 3]));
        let e = collect_logits(ctx, f_h, f_t, "garan.h0.va", "garan.h0.ta").unwrap();
        let a = ctx.tape.softmax(e, 1).unwrap();
        assert_close(ctx.tape.value(e).data(), &[0.0; 18], 0.0);
        assert_close(ctx.tape.value(a).data(), &[1.0 / 9.0; 18], 1e-15);
    });
}

#[test]
fn duplicated_anchors_get_identical_logits() {
    let c = cfg(1, 4, 3, 2);
    let (p, b) = garan_params(&c, 3);
    let mut f = random(&[1, 4, 4], 4, 1.0).data().to_vec();
    let copy: Vec<f64> = f[4..8].to_vec();
    f[12..16].copy_from_slice(&copy);
    with_ctx(&p, &b, &c, Mode::Eval, |ctx| {
        let f_h = ctx.tape.constant(t(&[1, 4, 4], &f));
        let f_t = ctx.tape.constant(random(&[1, 3], 5, 1.0));
        let e = collect_logits(ctx, f_h, f_t, "garan.h0.va", "garan.h0.ta").unwrap();
        let e = ctx.tape.value(e).data();
        assert_eq!(e[1], e[3]);
    });
}

fn run_collect(a: &[f64], f: &[f64], s: usize, c: usize) -> Vec<f64> {
    let m = ModelConfig::default();
    with_ctx(&Params::new(), &Params::new(), &m, Mode::Eval, |ctx| {
        let a = ctx.tape.constant(t(&[1, s], a));
        let f = ctx.tape.constant(t(&[1, s, c], f));
        let out = collect(ctx, a, f).unwrap();
        ctx.tape.value(out).data().to_vec()
    })
}

#[test]
fn collect_examples() {
    let f = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    assert_eq!(run_collect(&[0.0, 1.0, 0.0], &f, 3, 3), vec![4.0, 5.0, 6.0]);
    assert_close(
        &run_collect(&[1.0 / 3.0; 3], &f, 3, 3),
        &[4.0, 5.0, 6.0],
        1e-12,
    );
    assert_close(
        &run_collect(&[0.75, 0.25], &[4.0, -8.0, 0.0, 8.0], 2, 2),
        &[3.0, -4.0],
        1e-12,
    );
}

#[test]
#[cfg(debug_assertions)]
fn collect_rejects_weights_off_the_simplex() {
    let m = ModelConfig::default();
    with_ctx(&Params::new(), &Params::new(), &m, Mode::Eval, |ctx| {
        let a = ctx.tape.constant(t(&[1, 2], &[0.6, 0.6]));
        let f = ctx.tape.constant(t(&[1, 2, 1], &[1.0, 2.0]));
        assert!(collect(ctx, a, f).is_err());
    });
}

#[test]
fn diffuse_examples() {
    let m = ModelConfig::default();
    with_ctx(&Params::new(), &Params::new(), &m, Mode::Eval, |ctx| {
        let e = ctx.tape.constant(Tensor::zeros(vec![1, 3]));
        let alpha = ctx.tape.sigmoid(e).unwrap();
        let f = ctx.tape.constant(t(&[1, 2], &[2.0, -4.0]));
        let out = diffuse(ctx, alpha, f).unwrap();
        assert_eq!(ctx.tape.value(out).shape(), &[1, 3, 2]);
        assert_eq!(
            ctx.tape.value(out).data(),
            &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]
        );

        let alpha = ctx.tape.constant(t(&[1, 2], &[0.25, 0.9]));
        let out = diffuse(ctx, alpha, f).unwrap();
        assert_close(ctx.tape.value(out).data(), &[0.5, -1.0, 1.8, -3.6], 1e-12);
    });
}

#[test]
fn output_shapes() {
    for heads in [1, 2, 4] {
        let c = cfg(heads, 8, 3, 2);
        let (p, b) = garan_params(&c, 7);
        with_ctx(&p, &b, &c, Mode::Train, |ctx| {
            let f_v = ctx.tape.constant(random(&[2, 3, 3, 8], 8, 1.0));
            let f_t = ctx.tape.constant(random(&[2, 3], 9, 1.0));
            let (out, states) = garan_forward(ctx, &c, f_v, f_t).unwrap();
            assert_eq!(ctx.tape.shape(out), &[2, 3, 3, 8]);
            assert_eq!(states.len(), heads);
            for st in states {
                for v in [st.e_c, st.a_c, st.e_d, st.alpha] {
                    assert_eq!(ctx.tape.shape(v), &[2, 9]);
                }
                assert_eq!(ctx.tape.shape(st.f_att), &[2, 8 / heads]);
            }
        });
    }
}

#[test]
fn channels_not_divisible_by_heads_fail() {
    let c = cfg(3, 8, 3, 2);
    with_ctx(&Params::new(), &Params::new(), &c, Mode::Train, |ctx| {
        let f_v = ctx.tape.constant(Tensor::zeros(vec![1, 2, 2, 8]));
        let f_t = ctx.tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(garan_forward(ctx, &c, f_v, f_t).is_err());
    });
}

#[test]
fn one_head_equals_unsplit_single_head() {
    let c = cfg(1, 6, 4, 3);
    let (p, b) = garan_params(&c, 11);
    let (p, b): (Params<f32>, Params<f32>) = (p.cast(), b.cast());
    for i in 0..100u64 {
        for mode in [Mode::Train, Mode::Eval] {
            let f_v: Tensor<f32> = random(&[2, 3, 3, 6], 100 + i, 2.0).cast();
            let f_t: Tensor<f32> = random(&[2, 4], 300 + i, 2.0).cast();
            let run = |single: bool| {
                let mut tape = Tape::<f32>::new();
                let mut ctx = Ctx::new(&mut tape, &p, &b, &c, mode);
                let fv = ctx.tape.constant(f_v.clone());
                let ft = ctx.tape.constant(f_t.clone());
                let (out, st) = if single {
                    garan_single_head(&mut ctx, fv, ft).unwrap()
                } else {
                    let (o, s) = garan_forward(&mut ctx, &c, fv, ft).unwrap();
                    (o, s[0])
                };
                let v = |x| ctx.tape.value(x).data().to_vec();
                (v(out), v(st.a_c), v(st.alpha), v(st.f_att))
            };
            assert_eq!(run(true), run(false), "input {i}");
        }
    }
}

#[test]
fn composed_forward_with_identity_output() {
    // identity output conv, unit BN in eval mode and zero diffuse weights
    // (α = 1/2) leave leaky((f + f_att / 2) / sqrt(1 + eps)) per head slice
    let c = cfg(2, 4, 3, 2);
    let (mut p, b) = garan_params(&c, 13);
    p.insert(
        "garan.out.w",
        Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }),
    );
    for j in 0..2 {
        p.insert(format!("garan.h{j}.vd"), Tensor::zeros(vec![2, 2]));
    }
    let fv = random(&[1, 2, 2, 4], 14, 1.5);
    let ft = random(&[1, 3], 15, 1.5);
    let got = with_ctx(&p, &b, &c, Mode::Eval, |ctx| {
        let f_v = ctx.tape.constant(fv.clone());
        let f_t = ctx.tape.constant(ft.clone());
        let (out, _) = garan_forward(ctx, &c, f_v, f_t).unwrap();
        ctx.tape.value(out).data().to_vec()
    });
    let scale = 1.0 / (1.0 + c.bn_eps).sqrt();
    let mut want = vec![0.0; 16];
    for j in 0..2 {
        let anchors: Vec<Vec<f64>> = (0..4)
            .map(|a| fv.data()[a * 4 + 2 * j..a * 4 + 2 * j + 2].to_vec())
            .collect();
        let e = oracle_logits(
            &anchors,
            ft.data(),
            p.get(&format!("garan.h{j}.va")).unwrap(),
            p.get(&format!("garan.h{j}.ta")).unwrap(),
        );
        let a = oracle_softmax(&e);
        let f_att: Vec<f64> = (0..2)
            .map(|ch| (0..4).map(|i| a[i] * anchors[i][ch]).sum())
            .collect();
        for i in 0..4 {
            for ch in 0..2 {
                want[i * 4 + 2 * j + ch] = leaky((anchors[i][ch] + 0.5 * f_att[ch]) * scale);
            }
        }
    }
    assert_close(&got, &want, 1e-12);
}

#[test]
fn attention_target_examples() {
    // centred box at a cell centre scores 1 there
    let gt = [0.25, 0.25, 0.25, 0.25]; // centre (1.5, 1.5) on a 4×4 grid, 1×1 cells
    let a = attention_targets(gt, 4).unwrap();
    assert_eq!(a[4 + 1], 1.0);
    // no overlap far away
    assert_eq!(a[3 * 4 + 3], 0.0);

    // 2×2 box shifted by one cell: overlap 2, union 6
    let gt = [0.125, 0.125, 0.5, 0.5];
    let a = attention_targets(gt, 4).unwrap();
    assert_eq!(a[4 + 1], 1.0);
    assert_eq!(a[4 + 2], 1.0 / 3.0);
    assert_eq!(a[2 * 4 + 1], 1.0 / 3.0);
}

#[test]
fn attention_targets_reject_bad_boxes() {
    assert!(attention_targets([0.1, 0.1, 0.0, 0.2], 4).is_err());
    assert!(attention_targets([0.9, 0.1, 0.3, 0.2], 4).is_err());
    assert!(attention_targets([f64::NAN, 0.1, 0.3, 0.2], 4).is_err());
}

/// Number of sample points `(i + 1/2) / r` inside `[lo, hi)`, for `i < n·r`.
fn samples_in(lo: f64, hi: f64, n: usize, r: usize) -> u64 {
    (0..n * r)
        .filter(|&i| {
            let p = (i as f64 + 0.5) / r as f64;
            p >= lo && p < hi
        })
        .count() as u64
}

#[test]
fn attention_targets_match_rasterised_overlap() {
    // 1000 samples per cell along each axis; for axis-aligned rectangles the
    // 2-D sample count of an intersection is the product of 1-D counts
    let r = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..500 {
        let s = rng.gen_range(2..=8usize);
        let w = rng.gen_range(0.08..0.9);
        let h = rng.gen_range(0.08..0.9);
        let gt = [
            rng.gen_range(0.0..1.0 - w),
            rng.gen_range(0.0..1.0 - h),
            w,
            h,
        ];
        let got = attention_targets(gt, s).unwrap();
        let sf = s as f64;
        let (gx, gy, gw, gh) = (gt[0] * sf, gt[1] * sf, w * sf, h * sf);
        let (ax, ay) = (samples_in(gx, gx + gw, s, r), samples_in(gy, gy + gh, s, r));
        for row in 0..s {
            for col in 0..s {
                let px = col as f64 + 0.5 - gw / 2.0;
                let py = row as f64 + 0.5 - gh / 2.0;
                // placed boxes may leave the image, so count on a padded range
                let pad = |lo: f64, hi: f64| {
                    let shift = s as f64;
                    samples_in(lo + shift, hi + shift, 3 * s, r)
                };
                let (bx, by) = (pad(px, px + gw), pad(py, py + gh));
                let ix = pad(px.max(gx), (px + gw).min(gx + gw));
                let iy = pad(py.max(gy), (py + gh).min(gy + gh));
                let inter = (ix * iy) as f64;
                let union = (ax * ay + bx * by) as f64 - inter;
                let want = inter / union;
                let g = got[row * s + col];
                assert!(
                    (g - want).abs() < 5e-3,
                    "s {s} gt {gt:?} cell ({row}, {col}): {g} vs {want}"
                );
            }
        }
    }
}

fn loss_of(logits: &[Vec<f64>], target: &[f64], include_diffuse: bool) -> f64 {
    let c = ModelConfig::default();
    with_ctx(&Params::new(), &Params::new(), &c, Mode::Eval, |ctx| {
        let states: Vec<HeadState> = logits
            .iter()
            .map(|l| {
                let e = ctx.tape.constant(t(&[1, l.len()], l));
                HeadState {
                    e_c: e,
                    a_c: e,
                    e_d: e,
                    alpha: e,
                    f_att: e,
                }
            })
            .collect();
        let tg = t(&[1, target.len()], target);
        let l = attention_loss(ctx, &states, &tg, include_diffuse).unwrap();
        ctx.tape.value(l).data()[0]
    })
}

#[test]
fn attention_loss_examples() {
    let sat = loss_of(&[vec![50.0, -50.0, 50.0]], &[1.0, 0.0, 1.0], false);
    assert!(sat < 1e-12, "{sat}");
    let half = loss_of(&[vec![0.0; 4]], &[0.5; 4], false);
    assert!((half - 2f64.ln()).abs() < 1e-12);
    let one = loss_of(&[vec![0.3, -1.0]], &[0.2, 0.7], false);
    let two = loss_of(&[vec![0.3, -1.0], vec![0.3, -1.0]], &[0.2, 0.7], false);
    assert!((two - 2.0 * one).abs() < 1e-12);
    let with_d = loss_of(&[vec![0.3, -1.0]], &[0.2, 0.7], true);
    assert!((with_d - 2.0 * one).abs() < 1e-12);
    let want = -(0.2 * sigmoid(0.3).ln()
        + 0.8 * (1.0 - sigmoid(0.3)).ln()
        + 0.7 * sigmoid(-1.0).ln()
        + 0.3 * (1.0 - sigmoid(-1.0)).ln())
        / 2.0;
    assert!((one - want).abs() < 1e-12);
}

#[test]
fn attention_loss_reaches_collect_weights() {
    let c = cfg(2, 4, 3, 2);
    let (p, b) = garan_params(&c, 31);
    let mut tape = Tape::<f64>::new();
    let mut ctx = Ctx::new(&mut tape, &p, &b, &c, Mode::Train);
    let f_v = ctx.tape.constant(random(&[2, 2, 2, 4], 32, 1.0));
    let f_t = ctx.tape.constant(random(&[2, 3], 33, 1.0));
    let (_, states) = garan_forward(&mut ctx, &c, f_v, f_t).unwrap();
    let mut tg = attention_targets([0.1, 0.2, 0.5, 0.4], 2).unwrap();
    tg.extend(attention_targets([0.4, 0.0, 0.6, 0.9], 2).unwrap());
    let l = attention_loss(&mut ctx, &states, &t(&[2, 4], &tg), false).unwrap();
    drop(ctx);
    tape.backward(l).unwrap();
    let grads = tape.param_grads();
    for j in 0..2 {
        for kind in ["va", "ta"] {
            let name = format!("garan.h{j}.{kind}");
            let g = &grads.iter().find(|(n, _)| *n == name).unwrap().1;
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn head_invariants(seed in 0u64..100_000, heads in prop::sample::select(vec![1usize, 2, 4]), scale in 0.1f64..4.0) {
        let c = cfg(heads, 8, 3, 2);
        let (p, b) = garan_params(&c, seed);
        let fv = random(&[2, 3, 3, 8], seed + 1000, scale);
        let ok = with_ctx(&p, &b, &c, Mode::Train, |ctx| {
            let f_v = ctx.tape.constant(fv.clone());
            let f_t = ctx.tape.constant(random(&[2, 3], seed + 2000, scale));
            let (_, states) = garan_forward(ctx, &c, f_v, f_t).unwrap();
            let cw = 8 / heads;
            for (j, st) in states.iter().enumerate() {
                let a = ctx.tape.value(st.a_c).data();
                let alpha = ctx.tape.value(st.alpha).data();
                let f_att = ctx.tape.value(st.f_att).data();
                for bi in 0..2 {
                    let row = &a[bi * 9..][..9];
                    if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                        return false;
                    }
                    for ch in 0..cw {
                        let vals: Vec<f64> = (0..9).map(|i| fv.data()[((bi * 9) + i) * 8 + j * cw + ch]).collect();
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let v = f_att[bi * cw + ch];
                        if v < lo - 1e-9 || v > hi + 1e-9 {
                            return false;
                        }
                    }
                }
                if alpha.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                    return false;
                }
            }
            true
        });
        prop_assert!(ok);
    }

    #[test]
    fn attention_targets_are_bounded(s in 1usize..14, x in 0.0f64..0.9, y in 0.0f64..0.9, w in 0.01f64..1.0, h in 0.01f64..1.0) {
        let w = w.min(1.0 - x);
        let h = h.min(1.0 - y);
        prop_assume!(w > 1e-3 && h > 1e-3);
        let a = attention_targets([x, y, w, h], s).unwrap();
        prop_assert_eq!(a.len(), s * s);
        prop_assert!(a.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }
}
