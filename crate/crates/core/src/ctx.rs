use std::collections::HashMap;

use rgin_tensor::{NormMode, Padding, Scalar, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Result, RginError};
use crate::params::{bn_names, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are collected for the caller.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Batch statistics of one batch-norm layer, for running-average updates.
#[derive(Debug, Clone)]
pub struct BnStat<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Values pooled per channel.
    pub count: usize,
}

/// Forward-pass context: the tape plus where parameter values come from.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a Params<T>,
    buffers: &'a Params<T>,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
    pub mode: Mode,
    pub bn_stats: Vec<BnStat<T>>,
    pub slope: T,
    pub eps: T,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a Params<T>,
        buffers: &'a Params<T>,
        cfg: &ModelConfig,
        mode: Mode,
    ) -> Self {
        let mut frozen = Vec::new();
        if cfg.freeze_backbone {
            frozen.push("backbone.".to_string());
        }
        Ctx {
            tape,
            params,
            buffers,
            bound: HashMap::new(),
            frozen,
            mode,
            bn_stats: Vec::new(),
            slope: T::lit(cfg.slope),
            eps: T::lit(cfg.bn_eps),
        }
    }

    /// Uses `var` wherever parameter `name` is requested (gradient checks feed
    /// parameters in as tracked inputs this way).
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| RginError::InvalidArgument(format!("missing parameter {name}")))?;
        if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            Ok(self.tape.frozen_param(name, value))
        } else {
            Ok(self.tape.param(name, value))
        }
    }

    pub fn act(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.leaky_relu(x, self.slope)?)
    }

    /// `x: [r, in]` times parameter `name: [in, out]`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(name)?;
        Ok(self.tape.matmul(x, w)?)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let [g, b, m, v] = bn_names(prefix);
        let gamma = self.param(&g)?;
        let beta = self.param(&b)?;
        let out = match self.mode {
            Mode::Train => {
                let o = self
                    .tape
                    .batch_norm(x, gamma, beta, NormMode::Train, self.eps)?;
                let c = o.batch_mean.len();
                self.bn_stats.push(BnStat {
                    prefix: prefix.to_string(),
                    mean: o.batch_mean,
                    var: o.batch_var,
                    count: self.tape.value(x).len() / c,
                });
                o.out
            }
            Mode::Eval => {
                let missing = |n: &str| RginError::InvalidArgument(format!("missing buffer {n}"));
                let mean = self.buffers.get(&m).ok_or_else(|| missing(&m))?;
                let var = self.buffers.get(&v).ok_or_else(|| missing(&v))?;
                let mode = NormMode::Eval {
                    running_mean: mean.data(),
                    running_var: var.data(),
                };
                self.tape.batch_norm(x, gamma, beta, mode, self.eps)?.out
            }
        };
        Ok(out)
    }

    /// conv (no bias) → batch norm → leaky ReLU, `Same` padding.
    pub fn conv_bn_act(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.conv2d(x, w, stride, Padding::Same)?;
        let y = self.batch_norm(y, prefix)?;
        self.act(y)
    }
}

/// Folds one batch's statistics into running averages; variance is stored
/// unbiased.
pub fn update_running_stats(buffers: &mut Params<f32>, stats: &[BnStat<f32>], momentum: f64) {
    let mom = momentum as f32;
    for s in stats {
        let [_, _, m, v] = bn_names(&s.prefix);
        let unbias = if s.count > 1 {
            s.count as f32 / (s.count - 1) as f32
        } else {
            1.0
        };
        if let Some(rm) = buffers.get_mut(&m) {
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
        if let Some(rv) = buffers.get_mut(&v) {
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - mom) * *r + mom * b * unbias;
            }
        }
    }
}
