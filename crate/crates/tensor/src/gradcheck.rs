//! Central finite-difference checks of tape gradients in 64-bit precision.

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// analytically compare against an absolute tolerance of `tolerance * floor`.
    pub floor: f64,
    /// Upper bound on perturbed entries per input (evenly strided when exceeded).
    pub max_entries_per_input: usize,
    /// Adjoint corruption applied to the analytic pass only.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            floor: 1e-6,
            max_entries_per_input: usize::MAX,
            fault: None,
        }
    }
}

/// Largest discrepancy found, with its location.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let entries_checked = self.entries_checked + other.entries_checked;
        let mut best = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        best.entries_checked = entries_checked;
        best
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn sampled_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // stride chosen coprime-ish with common extents so samples spread over channels
    let stride = len as f64 / max as f64;
    (0..max)
        .map(|i| ((i as f64 * stride) as usize + i % 7).min(len - 1))
        .collect()
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences for every input. `f` receives one tracked variable per input.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new().with_finite_checks(true);
    if let Some(kind) = config.fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item().unwrap_or(f64::NAN))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in sampled_indices(input.len(), config.max_entries_per_input) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + config.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - config.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, config.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Deterministic splitmix64 stream for suite inputs.
struct Probe(u64);

impl Probe {
    fn next_unit(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-scale, scale], kept at least `gap` away from the given kinks.
    fn tensor(&mut self, shape: &[usize], scale: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let v = (self.next_unit() * 2.0 - 1.0) * scale;
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
    }
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct coefficient to the checked scalar.
fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let mut p = Probe(seed);
    let w = t.constant(p.tensor(&shape, 1.0, &[], 0.0));
    let prod = t.mul(v, w)?;
    t.sum(prod)
}

/// Finite-difference check of a single operation on randomized inputs.
pub fn op_suite(kind: OpKind, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut p = Probe(0x5eed ^ kind as u64);
    let gap = 1e-2;
    match kind {
        OpKind::MatMul => {
            let ins = [
                p.tensor(&[3, 4], 1.0, &[], 0.0),
                p.tensor(&[4, 2], 1.0, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 1)
                },
                config,
            )
        }
        OpKind::BatchMatMul => {
            let ins = [
                p.tensor(&[2, 3, 4], 1.0, &[], 0.0),
                p.tensor(&[2, 4, 2], 1.0, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    let y = t.batch_matmul(v[0], v[1])?;
                    project(t, y, 2)
                },
                config,
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let ins = [
                p.tensor(&[2, 3], 1.0, &[], 0.0),
                p.tensor(&[2, 3], 1.0, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    let y = match kind {
                        OpKind::Add => t.add(v[0], v[1])?,
                        OpKind::Sub => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, 3)
                },
                config,
            )
        }
        OpKind::AddBroadcast | OpKind::MulBroadcast => {
            let ins = [
                p.tensor(&[2, 3, 4], 1.0, &[], 0.0),
                p.tensor(&[2, 1, 4], 1.0, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    let y = if kind == OpKind::AddBroadcast {
                        t.add_broadcast(v[0], v[1])?
                    } else {
                        t.mul_broadcast(v[0], v[1])?
                    };
                    project(t, y, 4)
                },
                config,
            )
        }
        OpKind::Scale => {
            let ins = [p.tensor(&[5], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let y = t.scale(v[0], -0.7)?;
                    project(t, y, 5)
                },
                config,
            )
        }
        OpKind::Sigmoid | OpKind::Tanh | OpKind::LeakyRelu => {
            let ins = [p.tensor(&[3, 4], 3.0, &[0.0], gap)];
            check_gradients(
                &ins,
                |t, v| {
                    let y = match kind {
                        OpKind::Sigmoid => t.sigmoid(v[0])?,
                        OpKind::Tanh => t.tanh(v[0])?,
                        _ => t.leaky_relu(v[0], 0.1)?,
                    };
                    project(t, y, 6)
                },
                config,
            )
        }
        OpKind::Softmax => {
            let ins = [p.tensor(&[2, 5, 3], 2.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let a = t.softmax(v[0], 1)?;
                    let b = t.softmax(v[0], 2)?;
                    let s = t.add(a, b)?;
                    project(t, s, 7)
                },
                config,
            )
        }
        OpKind::Conv2d => {
            let ins = [
                p.tensor(&[2, 5, 6, 3], 1.0, &[], 0.0),
                p.tensor(&[3, 3, 3, 4], 0.5, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    let a = t.conv2d(v[0], v[1], 2, crate::Padding::Same)?;
                    let pa = project(t, a, 8)?;
                    let b = t.conv2d(v[0], v[1], 1, crate::Padding::Valid)?;
                    let pb = project(t, b, 9)?;
                    t.add(pa, pb)
                },
                config,
            )
        }
        OpKind::BatchNorm => {
            let ins = [
                p.tensor(&[3, 2, 2, 3], 2.0, &[], 0.0),
                p.tensor(&[3], 1.5, &[], 0.0),
                p.tensor(&[3], 1.0, &[], 0.0),
            ];
            let running_mean = [0.1, -0.2, 0.3];
            let running_var = [0.5, 1.5, 2.0];
            check_gradients(
                &ins,
                |t, v| {
                    let train = t.batch_norm(v[0], v[1], v[2], crate::NormMode::Train, 1e-5)?;
                    let a = project(t, train.out, 10)?;
                    let eval = crate::NormMode::Eval {
                        running_mean: &running_mean,
                        running_var: &running_var,
                    };
                    let e = t.batch_norm(v[0], v[1], v[2], eval, 1e-5)?;
                    let b = project(t, e.out, 11)?;
                    t.add(a, b)
                },
                config,
            )
        }
        OpKind::BceWithLogits => {
            let ins = [p.tensor(&[2, 4], 4.0, &[], 0.0)];
            let target = Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.37) % 1.0);
            let weight = Tensor::from_fn(vec![2, 4], |i| 0.5 + (i % 3) as f64);
            check_gradients(
                &ins,
                |t, v| {
                    let a = t.bce_with_logits(v[0], &target)?;
                    let b = t.bce_with_logits_weighted(v[0], &target, &weight)?;
                    t.add(a, b)
                },
                config,
            )
        }
        OpKind::SmoothL1 => {
            let ins = [p.tensor(&[2, 4], 3.0, &[-1.0, 1.0], gap)];
            check_gradients(
                &ins,
                |t, v| t.smooth_l1(v[0], &Tensor::zeros(vec![2, 4])),
                config,
            )
        }
        OpKind::Sum => {
            let ins = [p.tensor(&[3, 2], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let s = t.scale(v[0], 1.0)?;
                    let m = t.mul(s, v[0])?;
                    t.sum(m)
                },
                config,
            )
        }
        OpKind::Mean => {
            let ins = [p.tensor(&[3, 2], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let m = t.mul(v[0], v[0])?;
                    t.mean(m)
                },
                config,
            )
        }
        OpKind::Reshape => {
            let ins = [p.tensor(&[2, 6], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let r = t.reshape(v[0], &[3, 4])?;
                    project(t, r, 12)
                },
                config,
            )
        }
        OpKind::Concat | OpKind::Slice => {
            let ins = [
                p.tensor(&[2, 2, 4], 1.0, &[], 0.0),
                p.tensor(&[2, 2, 2], 1.0, &[], 0.0),
            ];
            check_gradients(
                &ins,
                |t, v| {
                    if kind == OpKind::Concat {
                        let c = t.concat(&[v[0], v[1]], 2)?;
                        project(t, c, 13)
                    } else {
                        let parts = t.split_channels(v[0], 2)?;
                        let a = project(t, parts[0], 14)?;
                        let mid = t.slice(v[1], 1, 1, 1)?;
                        let b = project(t, mid, 15)?;
                        t.add(a, b)
                    }
                },
                config,
            )
        }
        OpKind::GatherRows => {
            let ins = [p.tensor(&[4, 3], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let g = t.gather_rows(v[0], &[3, 1, 3])?;
                    project(t, g, 16)
                },
                config,
            )
        }
        OpKind::Gather => {
            let ins = [p.tensor(&[3, 3], 1.0, &[], 0.0)];
            check_gradients(
                &ins,
                |t, v| {
                    let g = t.gather(v[0], &[8, 0, 4, 8])?;
                    project(t, g, 17)
                },
                config,
            )
        }
    }
}
