//! Small strided conv stack and the projections to a common `s × s × m` shape.

use rgin_tensor::{Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::ctx::Ctx;
use crate::error::{Result, RginError};

/// Maps at 1/4, 1/8 and 1/16 of the input side.
#[derive(Debug, Clone, Copy)]
pub struct MultiScale {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

/// `[batch, canvas, canvas, c]` input from 8-bit RGB rasters, scaled to `[0, 1]`,
/// with x and y coordinate planes in `[-1, 1]` appended when configured.
pub fn image_batch<T: Scalar>(images: &[&[u8]], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let side = cfg.canvas;
    let c = cfg.input_channels();
    if images.is_empty() {
        return Err(RginError::InvalidArgument("empty image batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * side * side * c);
    let coord = |i: usize| T::lit((2.0 * i as f64 + 1.0) / side as f64 - 1.0);
    let inv = T::lit(1.0 / 255.0);
    for img in images {
        if img.len() != side * side * 3 {
            return Err(RginError::InvalidArgument(format!(
                "image has {} bytes, expected {side}x{side}x3",
                img.len()
            )));
        }
        for y in 0..side {
            for x in 0..side {
                let px = &img[(y * side + x) * 3..][..3];
                data.extend(px.iter().map(|&v| T::lit(v as f64) * inv));
                if cfg.coord_channels {
                    data.push(coord(x));
                    data.push(coord(y));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), side, side, c], data)?)
}

pub fn extract<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<MultiScale> {
    let shape = ctx.tape.shape(images).to_vec();
    if shape.len() != 4
        || shape[1] != cfg.canvas
        || shape[2] != cfg.canvas
        || shape[3] != cfg.input_channels()
    {
        return Err(RginError::InvalidArgument(format!(
            "backbone expects [batch, {0}, {0}, {1}], got {shape:?}",
            cfg.canvas,
            cfg.input_channels()
        )));
    }
    let x = ctx.conv_bn_act(images, "backbone.stem", 2)?;
    let f1 = ctx.conv_bn_act(x, "backbone.c1", 2)?;
    let f2 = ctx.conv_bn_act(f1, "backbone.c2", 2)?;
    let f3 = ctx.conv_bn_act(f2, "backbone.c3", 2)?;
    Ok(MultiScale { f1, f2, f3 })
}

/// 3×3 stride-4 on `F_v1`, 3×3 stride-2 on `F_v2`, 1×1 on `F_v3`, each to `m`
/// channels. With AFS disabled only the `F_v3` projection is computed.
pub fn project<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    feats: &MultiScale,
) -> Result<Vec<Var>> {
    let p3 = ctx.conv_bn_act(feats.f3, "proj.3", 1)?;
    if !cfg.enable_afs {
        return Ok(vec![p3]);
    }
    let p1 = ctx.conv_bn_act(feats.f1, "proj.1", 4)?;
    let p2 = ctx.conv_bn_act(feats.f2, "proj.2", 2)?;
    Ok(vec![p1, p2, p3])
}
