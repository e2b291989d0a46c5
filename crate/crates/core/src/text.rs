//! Bidirectional GRU text encoder.

use rgin_tensor::{Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::error::{Result, RginError};
use crate::vocab::PAD;

/// Runs one GRU direction over padded, batch-major `ids` (`[b * len + t]`) and
/// returns the state after each sequence's last real token.
///
/// Gates: `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = h + z ⊙ (h̃ - h)`.
/// Padded steps leave the state unchanged.
fn gru<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    ids: &[usize],
    lengths: &[usize],
    len: usize,
    hidden: usize,
) -> Result<Var> {
    let b = lengths.len();
    let n = hidden;
    let embed = ctx.param("text.embed")?;
    let x = ctx.tape.gather_rows(embed, ids)?;
    let xw = ctx.linear(x, &format!("{prefix}.w"))?;
    let bias = ctx.param(&format!("{prefix}.b"))?;
    let xw = ctx.tape.add_broadcast(xw, bias)?;
    let xw = ctx.tape.reshape(xw, &[b, len, 3 * n])?;
    let u_zr = ctx.param(&format!("{prefix}.u_zr"))?;
    let u_h = ctx.param(&format!("{prefix}.u_h"))?;

    let mut h = ctx.tape.constant(Tensor::zeros(vec![b, n]));
    for t in 0..len {
        let xt = ctx.tape.slice(xw, 1, t, 1)?;
        let xt = ctx.tape.reshape(xt, &[b, 3 * n])?;
        let parts = ctx.tape.split(xt, 1, 3)?;
        let hu = ctx.tape.matmul(h, u_zr)?;
        let hz = ctx.tape.slice(hu, 1, 0, n)?;
        let hr = ctx.tape.slice(hu, 1, n, n)?;
        let z = ctx.tape.add(parts[0], hz)?;
        let z = ctx.tape.sigmoid(z)?;
        let r = ctx.tape.add(parts[1], hr)?;
        let r = ctx.tape.sigmoid(r)?;
        let rh = ctx.tape.mul(r, h)?;
        let rhu = ctx.tape.matmul(rh, u_h)?;
        let cand = ctx.tape.add(parts[2], rhu)?;
        let cand = ctx.tape.tanh(cand)?;
        let delta = ctx.tape.sub(cand, h)?;
        let mut step = ctx.tape.mul(z, delta)?;
        if lengths.iter().any(|&l| l <= t) {
            let mask = Tensor::from_fn(vec![b, 1], |i| {
                if t < lengths[i] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let mask = ctx.tape.constant(mask);
            step = ctx.tape.mul_broadcast(step, mask)?;
        }
        h = ctx.tape.add(h, step)?;
    }
    Ok(h)
}

/// Text feature `f_t = h_fwd_last + h_bwd_last` for each sequence, `[batch, n]`.
/// The backward direction reads each sequence reversed.
pub fn encode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    tokens: &[Vec<usize>],
) -> Result<Var> {
    if tokens.is_empty() || tokens.iter().any(Vec::is_empty) {
        return Err(RginError::InvalidArgument(
            "encode needs non-empty token sequences".into(),
        ));
    }
    let embed = ctx.param("text.embed")?;
    let vocab = ctx.tape.shape(embed)[0];
    if let Some(bad) = tokens.iter().flatten().find(|&&id| id >= vocab) {
        return Err(RginError::InvalidArgument(format!(
            "token id {bad} outside embedding table of {vocab}"
        )));
    }
    let lengths: Vec<usize> = tokens.iter().map(|t| t.len().min(cfg.max_tokens)).collect();
    let len = *lengths.iter().max().unwrap();
    let mut fwd = Vec::with_capacity(tokens.len() * len);
    let mut bwd = Vec::with_capacity(tokens.len() * len);
    for (seq, &l) in tokens.iter().zip(&lengths) {
        let seq = &seq[..l];
        fwd.extend(seq.iter().copied().chain(std::iter::repeat(PAD)).take(len));
        bwd.extend(
            seq.iter()
                .rev()
                .copied()
                .chain(std::iter::repeat(PAD))
                .take(len),
        );
    }
    let hf = gru(ctx, "text.fwd", &fwd, &lengths, len, cfg.hidden)?;
    let hb = gru(ctx, "text.bwd", &bwd, &lengths, len, cfg.hidden)?;
    Ok(ctx.tape.add(hf, hb)?)
}
