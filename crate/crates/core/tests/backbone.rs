mod common;

use common::*;
use realgin::backbone::{extract, image_batch, project};
use realgin::ctx::Mode;
use realgin::params::{init_params, Params};
use realgin::ModelConfig;
use rgin_tensor::Tensor;

/// NHWC cross-correlation with "same" padding (`ceil(in / stride)` outputs,
/// smaller half of the padding on top/left), by direct loops.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [b, h, wd, cin] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [k, _, _, cout] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let pad_t = ((oh - 1) * stride + k).saturating_sub(h) / 2;
    let pad_l = ((ow - 1) * stride + k).saturating_sub(wd) / 2;
    let mut out = Tensor::zeros(vec![b, oh, ow, cout]);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad_t as isize;
                            let ix = (ox * stride + kx) as isize - pad_l as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[n, iy as usize, ix as usize, ci])
                                    * w.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    let idx = ((n * oh + oy) * ow + ox) * cout + co;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// conv → eval-mode batch norm → leaky ReLU, by hand.
fn block_oracle(
    x: &Tensor<f64>,
    p: &Params<f64>,
    b: &Params<f64>,
    prefix: &str,
    stride: usize,
    eps: f64,
) -> Tensor<f64> {
    let y = conv_oracle(x, p.get(&format!("{prefix}.w")).unwrap(), stride);
    let c = *y.shape().last().unwrap();
    let g = p
        .get(&format!("{prefix}.bn.gamma"))
        .unwrap()
        .data()
        .to_vec();
    let be = p.get(&format!("{prefix}.bn.beta")).unwrap().data().to_vec();
    let m = b.get(&format!("{prefix}.bn.mean")).unwrap().data().to_vec();
    let v = b.get(&format!("{prefix}.bn.var")).unwrap().data().to_vec();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &val)| {
            let ch = i % c;
            leaky(g[ch] * (val - m[ch]) / (v[ch] + eps).sqrt() + be[ch])
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).unwrap()
}

fn toy(coord: bool) -> ModelConfig {
    ModelConfig {
        coord_channels: coord,
        ..ModelConfig::toy()
    }
}

fn random_params(cfg: &ModelConfig, seed: u64) -> (Params<f64>, Params<f64>) {
    let (p, b) = init_params(cfg, 21, seed);
    let mut p = p.cast::<f64>();
    let mut b = b.cast::<f64>();
    // non-trivial normalisation statistics so the oracle exercises every term
    let names: Vec<String> = p.names().filter(|n| n.contains(".bn.")).cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = p.get(n).unwrap().shape().to_vec();
        let base = if n.ends_with("gamma") { 1.0 } else { 0.0 };
        let r = random(&shape, seed + i as u64, 0.3).map(|v| v + base);
        p.insert(n.clone(), r);
    }
    let bnames: Vec<String> = b.names().cloned().collect();
    for (i, n) in bnames.iter().enumerate() {
        let shape = b.get(n).unwrap().shape().to_vec();
        let r = if n.ends_with("var") {
            random(&shape, 100 + seed + i as u64, 0.5).map(|v| v + 1.0)
        } else {
            random(&shape, 100 + seed + i as u64, 0.2)
        };
        b.insert(n.clone(), r);
    }
    (p, b)
}

#[test]
fn image_batch_scales_pixels_and_appends_coordinates() {
    let cfg = ModelConfig {
        canvas: 16,
        ..ModelConfig::default()
    };
    let img: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 256) as u8).collect();
    let x = image_batch::<f64>(&[&img], &cfg).unwrap();
    assert_eq!(x.shape(), &[1, 16, 16, 5]);
    assert_eq!(x.at(&[0, 1, 2, 1]), img[(16 + 2) * 3 + 1] as f64 / 255.0);
    assert!((x.at(&[0, 0, 0, 3]) - (-15.0 / 16.0)).abs() < 1e-12);
    assert!((x.at(&[0, 0, 15, 3]) - (15.0 / 16.0)).abs() < 1e-12);
    assert!((x.at(&[0, 15, 0, 4]) - (15.0 / 16.0)).abs() < 1e-12);
    assert!(image_batch::<f64>(&[&img[1..]], &cfg).is_err());
    let plain = ModelConfig {
        coord_channels: false,
        ..cfg
    };
    assert_eq!(
        image_batch::<f64>(&[&img], &plain).unwrap().shape(),
        &[1, 16, 16, 3]
    );
}

#[test]
fn shapes_follow_config() {
    let cfg = ModelConfig::default();
    let (p, b) = init_params(&cfg, 21, 0);
    let (p, b) = (p.cast::<f64>(), b.cast::<f64>());
    let x = random(&[2, 96, 96, cfg.input_channels()], 1, 1.0);
    with_ctx(&p, &b, &cfg, Mode::Train, |ctx| {
        let x = ctx.tape.constant(x);
        let f = extract(ctx, &cfg, x).unwrap();
        assert_eq!(ctx.tape.shape(f.f1), &[2, 24, 24, cfg.widths[1]]);
        assert_eq!(ctx.tape.shape(f.f2), &[2, 12, 12, cfg.widths[2]]);
        assert_eq!(ctx.tape.shape(f.f3), &[2, 6, 6, cfg.widths[3]]);
        let maps = project(ctx, &cfg, &f).unwrap();
        assert_eq!(maps.len(), 3);
        for m in maps {
            assert_eq!(ctx.tape.shape(m), &[2, 6, 6, 64]);
        }
    });
    let wrong = random(&[1, 64, 64, cfg.input_channels()], 2, 1.0);
    with_ctx(&p, &b, &cfg, Mode::Train, |ctx| {
        let x = ctx.tape.constant(wrong);
        assert!(extract(ctx, &cfg, x).is_err());
    });
}

#[test]
fn zero_image_gives_zero_maps() {
    let cfg = toy(false);
    let (p, b) = init_params(&cfg, 21, 3);
    let (p, b) = (p.cast::<f64>(), b.cast::<f64>());
    for mode in [Mode::Train, Mode::Eval] {
        with_ctx(&p, &b, &cfg, mode, |ctx| {
            let x = ctx.tape.constant(Tensor::zeros(vec![2, 32, 32, 3]));
            let f = extract(ctx, &cfg, x).unwrap();
            let maps = project(ctx, &cfg, &f).unwrap();
            for v in [f.f1, f.f2, f.f3].into_iter().chain(maps) {
                assert!(ctx.tape.value(v).data().iter().all(|&x| x == 0.0));
            }
        });
    }
}

#[test]
fn eval_mode_matches_direct_loop_oracle() {
    for coord in [false, true] {
        let cfg = toy(coord);
        let (p, b) = random_params(&cfg, 7);
        let x = random(&[2, 32, 32, cfg.input_channels()], 8, 1.0);
        let eps = cfg.bn_eps;
        let s = block_oracle(&x, &p, &b, "backbone.stem", 2, eps);
        let f1 = block_oracle(&s, &p, &b, "backbone.c1", 2, eps);
        let f2 = block_oracle(&f1, &p, &b, "backbone.c2", 2, eps);
        let f3 = block_oracle(&f2, &p, &b, "backbone.c3", 2, eps);
        let p1 = block_oracle(&f1, &p, &b, "proj.1", 4, eps);
        let p2 = block_oracle(&f2, &p, &b, "proj.2", 2, eps);
        let p3 = block_oracle(&f3, &p, &b, "proj.3", 1, eps);
        with_ctx(&p, &b, &cfg, Mode::Eval, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let f = extract(ctx, &cfg, xv).unwrap();
            let maps = project(ctx, &cfg, &f).unwrap();
            for (got, want) in [f.f1, f.f2, f.f3, maps[0], maps[1], maps[2]]
                .iter()
                .zip([&f1, &f2, &f3, &p1, &p2, &p3])
            {
                let g = ctx.tape.value(*got);
                assert_eq!(g.shape(), want.shape());
                assert_close(g.data(), want.data(), 1e-10);
            }
        });
    }
}

/// Marks outputs of a "same" conv whose window touches a marked input.
fn cone(mask: &[bool], h: usize, k: usize, stride: usize) -> (Vec<bool>, usize) {
    let oh = h.div_ceil(stride);
    let pad = ((oh - 1) * stride + k).saturating_sub(h) / 2;
    let mut out = vec![false; oh * oh];
    for oy in 0..oh {
        for ox in 0..oh {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0
                        && ix >= 0
                        && (iy as usize) < h
                        && (ix as usize) < h
                        && mask[iy as usize * h + ix as usize]
                    {
                        out[oy * oh + ox] = true;
                    }
                }
            }
        }
    }
    (out, oh)
}

#[test]
fn single_pixel_stays_inside_its_receptive_field() {
    let cfg = toy(false);
    let (p, b) = init_params(&cfg, 21, 11);
    let (p, b) = (p.cast::<f64>(), b.cast::<f64>());
    let (py, px) = (13, 6);
    let mut x = Tensor::zeros(vec![1, 32, 32, 3]);
    for c in 0..3 {
        x.data_mut()[(py * 32 + px) * 3 + c] = 1.0;
    }
    let mut mask = vec![false; 32 * 32];
    mask[py * 32 + px] = true;
    let (m0, h0) = cone(&mask, 32, 3, 2);
    let (m1, h1) = cone(&m0, h0, 3, 2);
    let (m2, _) = cone(&m1, h1, 3, 2);
    let s = block_oracle(&x, &p, &b, "backbone.stem", 2, cfg.bn_eps);
    let f1 = block_oracle(&s, &p, &b, "backbone.c1", 2, cfg.bn_eps);
    with_ctx(&p, &b, &cfg, Mode::Eval, |ctx| {
        let xv = ctx.tape.constant(x.clone());
        let f = extract(ctx, &cfg, xv).unwrap();
        let c1 = cfg.widths[1];
        let got = ctx.tape.value(f.f1);
        assert_close(got.data(), f1.data(), 1e-12);
        let mut inside = 0;
        for (cell, v) in got.data().chunks(c1).enumerate() {
            if v.iter().any(|&a| a != 0.0) {
                assert!(m1[cell], "activation outside the cone at cell {cell}");
                inside += 1;
            }
        }
        assert!(inside > 0);
        for (cell, v) in ctx
            .tape
            .value(f.f2)
            .data()
            .chunks(cfg.widths[2])
            .enumerate()
        {
            if v.iter().any(|&a| a != 0.0) {
                assert!(m2[cell], "f2 activation outside the cone at cell {cell}");
            }
        }
    });
}

#[test]
fn deterministic_in_eval_mode() {
    let cfg = toy(true);
    let (p, b) = random_params(&cfg, 12);
    let x = random(&[2, 32, 32, cfg.input_channels()], 13, 1.0);
    let run = || {
        with_ctx(&p, &b, &cfg, Mode::Eval, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let f = extract(ctx, &cfg, xv).unwrap();
            let maps = project(ctx, &cfg, &f).unwrap();
            ctx.tape.value(maps[2]).clone()
        })
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn only_coarsest_projection_without_afs() {
    let cfg = ModelConfig {
        enable_afs: false,
        ..toy(false)
    };
    let (p, b) = init_params(&cfg, 21, 1);
    assert!(p.get("proj.1.w").is_none() && p.get("afs.w").is_none());
    let (p, b) = (p.cast::<f64>(), b.cast::<f64>());
    with_ctx(&p, &b, &cfg, Mode::Train, |ctx| {
        let xv = ctx.tape.constant(random(&[2, 32, 32, 3], 2, 1.0));
        let f = extract(ctx, &cfg, xv).unwrap();
        assert_eq!(project(ctx, &cfg, &f).unwrap().len(), 1);
    });
}
