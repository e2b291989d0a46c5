//! Adaptive feature selection: text-predicted convex weights over the
//! projected scales.

use rgin_tensor::{Scalar, Var};

use crate::ctx::Ctx;
use crate::error::{Result, RginError};

/// `β = softmax(f_t W + b)`, `[batch, 3]`.
pub fn predict_weights<T: Scalar>(ctx: &mut Ctx<'_, T>, f_t: Var) -> Result<Var> {
    let logits = ctx.linear(f_t, "afs.w")?;
    let b = ctx.param("afs.b")?;
    let logits = ctx.tape.add_broadcast(logits, b)?;
    Ok(ctx.tape.softmax(logits, 1)?)
}

/// `F_v = Σ_i β_i F_vi` per sample; every map is `[batch, s, s, m]`.
pub fn fuse<T: Scalar>(ctx: &mut Ctx<'_, T>, maps: &[Var], beta: Var) -> Result<Var> {
    let shape = ctx.tape.shape(maps[0]).to_vec();
    if maps.iter().any(|&m| ctx.tape.shape(m) != shape.as_slice()) {
        return Err(RginError::InvalidArgument(
            "AFS maps differ in shape".into(),
        ));
    }
    let k = maps.len();
    if ctx.tape.shape(beta) != [shape[0], k] {
        return Err(RginError::InvalidArgument(format!(
            "AFS weights {:?} do not match {k} maps",
            ctx.tape.shape(beta)
        )));
    }
    let b = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let flat: Vec<Var> = maps
        .iter()
        .map(|&m| ctx.tape.reshape(m, &[b, 1, per]))
        .collect::<std::result::Result<_, _>>()?;
    let stacked = ctx.tape.concat(&flat, 1)?;
    let beta = ctx.tape.reshape(beta, &[b, 1, k])?;
    let fused = ctx.tape.batch_matmul(beta, stacked)?;
    Ok(ctx.tape.reshape(fused, &shape)?)
}
