//! Finite-difference gradient checks: every tape op plus the model's
//! composite blocks and the full loss on a toy configuration, all in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgin_tensor::gradcheck::{check_gradients, op_suite, GradCheckConfig, GradCheckReport};
use rgin_tensor::{OpKind, Tape, Tensor, Var};

use crate::afs;
use crate::backbone;
use crate::config::ModelConfig;
use crate::ctx::{Ctx, Mode};
use crate::error::Result;
use crate::garan;
use crate::head;
use crate::model::{forward, loss, targets_for, Targets};
use crate::params::{init_params, Params};
use crate::text;
use crate::vocab::{tokenize, Vocabulary};

/// Relative error bound every check must stay under.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckRow {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

/// Composite blocks checked on top of the per-op suites.
pub const MODEL_SUITES: [&str; 6] = [
    "text.bigru",
    "backbone",
    "afs",
    "garan",
    "head.det_loss",
    "e2e.loss",
];

/// Toy setting for the end-to-end check: 2×2 grid, 8 channels, 2 heads, 1 prior.
pub fn toy_config() -> ModelConfig {
    ModelConfig::toy()
}

struct Fixture {
    cfg: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    buffers: Params<f64>,
    images: Tensor<f64>,
    tokens: Vec<Vec<usize>>,
    targets: Vec<Targets>,
}

impl Fixture {
    fn new(cfg: ModelConfig) -> Result<Fixture> {
        let vocab = Vocabulary::synthetic();
        let (params, buffers) = init_params(&cfg, vocab.size(), 17);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // move batch-norm affine terms off their identity initialisation so
        // their gradients are not trivially structured
        let params: Params<f64> = {
            let mut p = params.cast::<f64>();
            let names: Vec<String> = p.names().filter(|n| n.contains(".bn.")).cloned().collect();
            for n in names {
                for v in p.get_mut(&n).unwrap().data_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
            p
        };
        let pixels: Vec<u8> = (0..2 * cfg.canvas * cfg.canvas * 3)
            .map(|_| rng.gen())
            .collect();
        let per = cfg.canvas * cfg.canvas * 3;
        let images = backbone::image_batch::<f64>(&[&pixels[..per], &pixels[per..]], &cfg)?;
        let tokens = vec![
            tokenize("red circle", &vocab, cfg.max_tokens)?.ids,
            tokenize(
                "the blue square left of the green triangle",
                &vocab,
                cfg.max_tokens,
            )?
            .ids,
        ];
        let s = cfg.grid();
        let priors = vec![(0.9, 1.1); cfg.priors];
        let targets = vec![
            targets_for([0.1, 0.2, 0.4, 0.3], &priors, s)?,
            targets_for([0.55, 0.4, 0.3, 0.5], &priors, s)?,
        ];
        let (names, values): (Vec<String>, Vec<Tensor<f64>>) =
            params.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
        Ok(Fixture {
            cfg,
            names,
            values,
            buffers: buffers.cast(),
            images,
            tokens,
            targets,
        })
    }

    /// Checks `f` with respect to the parameters whose names start with one
    /// of `prefixes`; other parameters enter as constants.
    fn check<F>(&self, prefixes: &[&str], config: &GradCheckConfig, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    {
        let picked: Vec<usize> = (0..self.names.len())
            .filter(|&i| prefixes.iter().any(|p| self.names[i].starts_with(p)))
            .collect();
        let mut fixed = Params::new();
        for (i, (n, v)) in self.names.iter().zip(&self.values).enumerate() {
            if !picked.contains(&i) {
                fixed.insert(n.clone(), v.clone());
            }
        }
        let inputs: Vec<Tensor<f64>> = picked.iter().map(|&i| self.values[i].clone()).collect();
        let run = |tape: &mut Tape<f64>, vars: &[Var]| -> rgin_tensor::Result<Var> {
            let mut ctx = Ctx::new(tape, &fixed, &self.buffers, &self.cfg, Mode::Train);
            for (&i, &v) in picked.iter().zip(vars) {
                ctx.bind(self.names[i].clone(), v);
            }
            let x = ctx.tape.constant(self.images.clone());
            f(&mut ctx, x).map_err(into_tensor_error)
        };
        Ok(check_gradients(&inputs, run, config)?)
    }
}

fn into_tensor_error(e: crate::error::RginError) -> rgin_tensor::TensorError {
    match e {
        crate::error::RginError::Tensor(t) => t,
        other => rgin_tensor::TensorError::InvalidArgument {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// `Σ y ⊙ r` with a fixed pseudo-random `r`, reducing any output to a scalar
/// that depends on every entry.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = ctx.tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let r = ctx.tape.constant(r);
    let p = ctx.tape.mul(y, r)?;
    Ok(ctx.tape.sum(p)?)
}

fn model_suite(name: &str, fx: &Fixture, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let cfg = fx.cfg.clone();
    let tokens = &fx.tokens;
    match name {
        "text.bigru" => fx.check(&["text."], config, |ctx, _| {
            let f_t = text::encode(ctx, &cfg, tokens)?;
            project(ctx, f_t, 1)
        }),
        "backbone" => fx.check(&["backbone.", "proj."], config, |ctx, x| {
            let feats = backbone::extract(ctx, &cfg, x)?;
            let maps = backbone::project(ctx, &cfg, &feats)?;
            let mut total = project(ctx, maps[0], 2)?;
            for (i, &m) in maps.iter().enumerate().skip(1) {
                let p = project(ctx, m, 2 + i as u64)?;
                total = ctx.tape.add(total, p)?;
            }
            Ok(total)
        }),
        "afs" => fx.check(&["afs.", "proj.", "text.fwd."], config, |ctx, x| {
            let f_t = text::encode(ctx, &cfg, tokens)?;
            let feats = backbone::extract(ctx, &cfg, x)?;
            let maps = backbone::project(ctx, &cfg, &feats)?;
            let beta = afs::predict_weights(ctx, f_t)?;
            let fused = afs::fuse(ctx, &maps, beta)?;
            project(ctx, fused, 5)
        }),
        "garan" => fx.check(&["garan.", "proj.3"], config, |ctx, x| {
            let f_t = text::encode(ctx, &cfg, tokens)?;
            let feats = backbone::extract(ctx, &cfg, x)?;
            let maps = backbone::project(ctx, &cfg, &feats)?;
            let f_v = *maps.last().unwrap();
            let (out, states) = garan::garan_forward(ctx, &cfg, f_v, f_t)?;
            let mut total = project(ctx, out, 6)?;
            let s2 = cfg.grid() * cfg.grid();
            let att_t = Tensor::new(
                vec![fx.targets.len(), s2],
                fx.targets
                    .iter()
                    .flat_map(|t| t.attention.clone())
                    .collect(),
            )?;
            let att = garan::attention_loss(ctx, &states, &att_t, true)?;
            total = ctx.tape.add(total, att)?;
            Ok(total)
        }),
        "head.det_loss" => fx.check(&["fuse.", "head."], config, |ctx, x| {
            let f_t = text::encode(ctx, &cfg, tokens)?;
            let feats = backbone::extract(ctx, &cfg, x)?;
            let maps = backbone::project(ctx, &cfg, &feats)?;
            let f_m = head::fuse_multimodal(ctx, *maps.last().unwrap(), f_t)?;
            let raw = head::predict_raw(ctx, f_m)?;
            let assignments: Vec<_> = fx.targets.iter().map(|t| t.assignment.clone()).collect();
            head::detection_loss(ctx, raw, &assignments, cfg.neg_weight)
        }),
        "e2e.loss" => fx.check(&[""], config, |ctx, x| {
            let out = forward(ctx, &cfg, x, tokens)?;
            Ok(loss(ctx, &cfg, &out, &fx.targets)?.total)
        }),
        other => panic!("unknown suite {other}"),
    }
}

/// Runs every per-op suite and every composite suite. Each tape op appears
/// exactly once, named as in [`OpKind::name`].
pub fn run_all(config: &GradCheckConfig) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in OpKind::ALL {
        rows.push(CheckRow {
            name: kind.name().to_string(),
            report: op_suite(kind, config)?,
        });
    }
    let mut cfg = toy_config();
    cfg.neg_weight = 0.5;
    cfg.lambda = 0.5;
    let fx = Fixture::new(cfg)?;
    for name in MODEL_SUITES {
        rows.push(CheckRow {
            name: name.to_string(),
            report: model_suite(name, &fx, config)?,
        });
    }
    Ok(rows)
}
