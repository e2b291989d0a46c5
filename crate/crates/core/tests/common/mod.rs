#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realgin::ctx::{Ctx, Mode};
use realgin::params::Params;
use realgin::ModelConfig;
use rgin_tensor::{Tape, Tensor};

pub fn params(pairs: Vec<(&str, Tensor<f64>)>) -> Params<f64> {
    let mut p = Params::new();
    for (k, v) in pairs {
        p.insert(k, v);
    }
    p
}

pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Runs `f` with a fresh f64 tape over the given parameters.
pub fn with_ctx<R>(
    p: &Params<f64>,
    b: &Params<f64>,
    cfg: &ModelConfig,
    mode: Mode,
    f: impl FnOnce(&mut Ctx<'_, f64>) -> R,
) -> R {
    let mut tape = Tape::<f64>::new();
    let mut ctx = Ctx::new(&mut tape, p, b, cfg, mode);
    f(&mut ctx)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.1 * x
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}
