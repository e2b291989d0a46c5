//! Global attentive reasoning: per head, text-guided collect attention pools
//! the anchors into one feature, sigmoid diffuse gates write it back to every
//! anchor, and a residual 1×1 conv merges the result with the input map.

use rgin_tensor::{Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::error::{Result, RginError};

/// Per-head intermediate values, kept for the attention loss and heatmaps.
/// Grids are flattened row-major to `[batch, s * s]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadState {
    pub e_c: Var,
    pub a_c: Var,
    pub e_d: Var,
    pub alpha: Var,
    /// `[batch, m / k]`
    pub f_att: Var,
}

/// `e^i = act(f_v^i W_v) · act(f_t W_t)` for every anchor; `f_h: [batch, anchors, c]`.
pub fn collect_logits<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    f_h: Var,
    f_t: Var,
    w_v: &str,
    w_t: &str,
) -> Result<Var> {
    let [b, s, c] = dims3(ctx, f_h)?;
    let x = ctx.tape.reshape(f_h, &[b * s, c])?;
    let v = ctx.linear(x, w_v)?;
    let v = ctx.act(v)?;
    let da = ctx.tape.shape(v)[1];
    let v = ctx.tape.reshape(v, &[b, s, da])?;
    let t = ctx.linear(f_t, w_t)?;
    let t = ctx.act(t)?;
    let t = ctx.tape.reshape(t, &[b, da, 1])?;
    let e = ctx.tape.batch_matmul(v, t)?;
    Ok(ctx.tape.reshape(e, &[b, s])?)
}

/// `f_att = Σ_i a^i f^i`. In debug builds rejects weights that do not sum to 1.
pub fn collect<T: Scalar>(ctx: &mut Ctx<'_, T>, a_c: Var, f_h: Var) -> Result<Var> {
    let [b, s, c] = dims3(ctx, f_h)?;
    if cfg!(debug_assertions) {
        let tol = T::lit(1e-4);
        for row in ctx.tape.value(a_c).data().chunks(s) {
            let total = row.iter().fold(T::zero(), |acc, &v| acc + v);
            if (total - T::one()).abs() > tol || row.iter().any(|&v| v < T::zero()) {
                return Err(RginError::InvalidArgument(format!(
                    "collect weights sum to {total}, not 1"
                )));
            }
        }
    }
    let a = ctx.tape.reshape(a_c, &[b, 1, s])?;
    let f = ctx.tape.batch_matmul(a, f_h)?;
    Ok(ctx.tape.reshape(f, &[b, c])?)
}

/// `f_a^i = α^i f_att` at every anchor, `[batch, anchors, c]`.
pub fn diffuse<T: Scalar>(ctx: &mut Ctx<'_, T>, alpha: Var, f_att: Var) -> Result<Var> {
    let (b, s) = (ctx.tape.shape(alpha)[0], ctx.tape.shape(alpha)[1]);
    let c = ctx.tape.shape(f_att)[1];
    let a = ctx.tape.reshape(alpha, &[b, s, 1])?;
    let f = ctx.tape.reshape(f_att, &[b, 1, c])?;
    Ok(ctx.tape.batch_matmul(a, f)?)
}

fn dims3<T: Scalar>(ctx: &Ctx<'_, T>, x: Var) -> Result<[usize; 3]> {
    let s = ctx.tape.shape(x);
    <[usize; 3]>::try_from(s)
        .map_err(|_| RginError::InvalidArgument(format!("expected [batch, anchors, c], got {s:?}")))
}

/// Collect → attend → diffuse for head `j` on its channel slice.
fn head<T: Scalar>(ctx: &mut Ctx<'_, T>, f_h: Var, f_t: Var, j: usize) -> Result<(HeadState, Var)> {
    let e_c = collect_logits(
        ctx,
        f_h,
        f_t,
        &format!("garan.h{j}.va"),
        &format!("garan.h{j}.ta"),
    )?;
    let a_c = ctx.tape.softmax(e_c, 1)?;
    let f_att = collect(ctx, a_c, f_h)?;
    let e_d = collect_logits(
        ctx,
        f_h,
        f_t,
        &format!("garan.h{j}.vd"),
        &format!("garan.h{j}.td"),
    )?;
    let alpha = ctx.tape.sigmoid(e_d)?;
    let spread = diffuse(ctx, alpha, f_att)?;
    let state = HeadState {
        e_c,
        a_c,
        e_d,
        alpha,
        f_att,
    };
    Ok((state, spread))
}

/// `F_v' = act(bn(conv1×1(F_v + F_att)))`, back in `[batch, s, s, m]`.
fn residual<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    flat: Var,
    f_att: Var,
    shape: &[usize],
) -> Result<Var> {
    let (b, s, m) = (shape[0], shape[1] * shape[2], shape[3]);
    let sum = ctx.tape.add(flat, f_att)?;
    let sum = ctx.tape.reshape(sum, &[b * s, m])?;
    let y = ctx.linear(sum, "garan.out.w")?;
    let y = ctx.batch_norm(y, "garan.out")?;
    let y = ctx.act(y)?;
    Ok(ctx.tape.reshape(y, shape)?)
}

/// Multi-head GARAN on `f_v: [batch, s, s, m]` with the channels split into
/// `cfg.heads` contiguous groups.
pub fn garan_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    f_v: Var,
    f_t: Var,
) -> Result<(Var, Vec<HeadState>)> {
    let shape = ctx.tape.shape(f_v).to_vec();
    if shape.len() != 4 || shape[3] % cfg.heads != 0 {
        return Err(RginError::InvalidArgument(format!(
            "GARAN input {shape:?} cannot be split into {} heads",
            cfg.heads
        )));
    }
    let flat = ctx
        .tape
        .reshape(f_v, &[shape[0], shape[1] * shape[2], shape[3]])?;
    let parts = ctx.tape.split_channels(flat, cfg.heads)?;
    let mut states = Vec::with_capacity(cfg.heads);
    let mut spreads = Vec::with_capacity(cfg.heads);
    for (j, &part) in parts.iter().enumerate() {
        let (state, spread) = head(ctx, part, f_t, j)?;
        states.push(state);
        spreads.push(spread);
    }
    let f_att = ctx.tape.concat_channels(&spreads)?;
    let out = residual(ctx, flat, f_att, &shape)?;
    Ok((out, states))
}

/// Single-head GARAN without any channel split, using head 0's parameters.
pub fn garan_single_head<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    f_v: Var,
    f_t: Var,
) -> Result<(Var, HeadState)> {
    let shape = ctx.tape.shape(f_v).to_vec();
    if shape.len() != 4 {
        return Err(RginError::InvalidArgument(format!(
            "GARAN input {shape:?} is not [batch, s, s, m]"
        )));
    }
    let flat = ctx
        .tape
        .reshape(f_v, &[shape[0], shape[1] * shape[2], shape[3]])?;
    let (state, spread) = head(ctx, flat, f_t, 0)?;
    let out = residual(ctx, flat, spread, &shape)?;
    Ok((out, state))
}

/// Placement-IoU supervision: for each cell of an `s × s` grid, a copy of the
/// ground-truth box centred on the cell centre, scored by exact IoU with the
/// ground truth. `gt` is normalised `[x, y, w, h]` with `(x, y)` top-left.
pub fn attention_targets(gt: [f64; 4], s: usize) -> Result<Vec<f64>> {
    let [x, y, w, h] = gt;
    let tol = 1e-6;
    if !gt.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(RginError::InvalidArgument(format!("degenerate box {gt:?}")));
    }
    if x < -tol || y < -tol || x + w > 1.0 + tol || y + h > 1.0 + tol {
        return Err(RginError::InvalidArgument(format!(
            "box {gt:?} outside the image"
        )));
    }
    let sf = s as f64;
    let (gw, gh) = (w * sf, h * sf);
    let (gx0, gy0) = (x * sf, y * sf);
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let (px0, py0) = (col as f64 + 0.5 - gw / 2.0, row as f64 + 0.5 - gh / 2.0);
            let ix = (px0 + gw).min(gx0 + gw) - px0.max(gx0);
            let iy = (py0 + gh).min(gy0 + gh) - py0.max(gy0);
            let inter = ix.max(0.0) * iy.max(0.0);
            out.push(inter / (2.0 * gw * gh - inter));
        }
    }
    Ok(out)
}

/// Σ over heads of mean BCE between collect logits and the shared targets
/// (`[batch, s * s]`). With `include_diffuse`, diffuse logits get the same term.
pub fn attention_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    states: &[HeadState],
    targets: &Tensor<T>,
    include_diffuse: bool,
) -> Result<Var> {
    if states.is_empty() {
        return Err(RginError::InvalidArgument(
            "attention loss needs at least one head".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for st in states {
        let mut logits = vec![st.e_c];
        if include_diffuse {
            logits.push(st.e_d);
        }
        for e in logits {
            let l = ctx.tape.bce_with_logits(e, targets)?;
            total = Some(match total {
                Some(t) => ctx.tape.add(t, l)?,
                None => l,
            });
        }
    }
    Ok(total.unwrap())
}
