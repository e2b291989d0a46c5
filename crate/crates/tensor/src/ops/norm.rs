use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

/// Statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Output of a batch-norm op plus the per-channel batch statistics (biased
/// variance) so the caller can update its running averages.
#[derive(Debug, Clone)]
pub struct BatchNormOutput<T> {
    pub out: Var,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalisation of `x: [batch, ..., c]` followed by the affine
    /// map `gamma * x̂ + beta`. Statistics pool every position except the channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<BatchNormOutput<T>> {
        self.ensure_live()?;
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("batch_norm", "rank-0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::mismatch("batch_norm", &shape, self.shape(p)));
            }
        }
        let data = self.value(x).data();
        let rows = data.len() / c;
        let (mean, var, train) = match mode {
            NormMode::Train => {
                if shape.len() < 2 || shape[0] < 2 {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        format!("train mode needs a batch of at least 2, got shape {shape:?}"),
                    ));
                }
                let n = T::lit(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in data.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in data.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean, var, true)
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        "running statistics length",
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok(BatchNormOutput {
            out,
            batch_mean: mean,
            batch_var: var,
        })
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    (x, gamma_var, beta_var): (Var, Var, Var),
    g: &[T],
    grads: &mut Grads<T>,
) {
    let c = gamma.len();
    let rows = g.len() / c;
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] += gr[ch];
            sum_gx[ch] += gr[ch] * xr[ch];
        }
    }
    grads.add(gamma_var, &sum_gx);
    grads.add(beta_var, &sum_g);
    if !grads.wants(x) {
        return;
    }
    let n = T::lit(rows as f64);
    let gm = gamma.data();
    let slot = grads.slot(x);
    for ((sr, gr), xr) in slot
        .chunks_exact_mut(c)
        .zip(g.chunks_exact(c))
        .zip(xhat.chunks_exact(c))
    {
        for ch in 0..c {
            let scale = gm[ch] * inv_std[ch];
            sr[ch] += if train {
                scale * (gr[ch] - sum_g[ch] / n - xr[ch] * sum_gx[ch] / n)
            } else {
                scale * gr[ch]
            };
        }
    }
}
