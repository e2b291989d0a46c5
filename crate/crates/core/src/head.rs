//! Multimodal fusion, the anchor-based box head, target assignment and losses.

use rgin_tensor::{sigmoid_scalar, Scalar, Tensor, Var};

use crate::ctx::Ctx;
use crate::error::{Result, RginError};

/// Exponent clamp for `t_w`, `t_h` when decoding.
pub const MAX_LOG_SCALE: f64 = 8.0;
/// σ-space offsets are kept this far from 0 and 1 before logit inversion.
pub const SIGMA_EPS: f64 = 1e-6;

/// `F_m = act(F_v' W_v) ⊙ act(f_t W_t)` with the text term broadcast over
/// anchors. `f_v: [batch, s, s, m]`, `f_t: [batch, n]` → `[batch, s * s, d]`.
pub fn fuse_multimodal<T: Scalar>(ctx: &mut Ctx<'_, T>, f_v: Var, f_t: Var) -> Result<Var> {
    let shape = ctx.tape.shape(f_v).to_vec();
    let (b, s, m) = (shape[0], shape[1] * shape[2], shape[3]);
    let x = ctx.tape.reshape(f_v, &[b * s, m])?;
    let v = ctx.linear(x, "fuse.wv")?;
    let v = ctx.act(v)?;
    let d = ctx.tape.shape(v)[1];
    let v = ctx.tape.reshape(v, &[b, s, d])?;
    let t = ctx.linear(f_t, "fuse.wt")?;
    let t = ctx.act(t)?;
    let t = ctx.tape.reshape(t, &[b, 1, d])?;
    Ok(ctx.tape.mul_broadcast(v, t)?)
}

/// Linear 1×1 conv with bias to `N * 5` raw outputs per anchor, laid out as
/// `(t_x, t_y, t_w, t_h, t_c)` per prior: `[batch, s * s, N * 5]`.
pub fn predict_raw<T: Scalar>(ctx: &mut Ctx<'_, T>, f_m: Var) -> Result<Var> {
    let shape = ctx.tape.shape(f_m).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let x = ctx.tape.reshape(f_m, &[b * s, d])?;
    let y = ctx.linear(x, "head.w")?;
    let bias = ctx.param("head.b")?;
    let y = ctx.tape.add_broadcast(y, bias)?;
    let out = ctx.tape.shape(y)[1];
    Ok(ctx.tape.reshape(y, &[b, s, out])?)
}

/// Box in grid units: centre `(x, y)` and size `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl GridBox {
    /// From a normalised top-left `[x, y, w, h]` on an `s × s` grid.
    pub fn from_normalized(b: [f64; 4], s: usize) -> GridBox {
        let sf = s as f64;
        GridBox {
            x: (b[0] + b[2] / 2.0) * sf,
            y: (b[1] + b[3] / 2.0) * sf,
            w: b[2] * sf,
            h: b[3] * sf,
        }
    }

    pub fn to_normalized(&self, s: usize) -> [f64; 4] {
        let sf = s as f64;
        [
            (self.x - self.w / 2.0) / sf,
            (self.y - self.h / 2.0) / sf,
            self.w / sf,
            self.h / sf,
        ]
    }
}

/// Exact intersection over union of two axis-aligned boxes.
pub fn iou(a: &GridBox, b: &GridBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(RginError::InvalidArgument(format!("degenerate box {bx:?}")));
        }
    }
    let ix = (a.x + a.w / 2.0).min(b.x + b.w / 2.0) - (a.x - a.w / 2.0).max(b.x - b.w / 2.0);
    let iy = (a.y + a.h / 2.0).min(b.y + b.h / 2.0) - (a.y - a.h / 2.0).max(b.y - b.h / 2.0);
    let inter = ix.max(0.0) * iy.max(0.0);
    Ok(inter / (a.w * a.h + b.w * b.h - inter))
}

/// One decoded prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedBox {
    pub row: usize,
    pub col: usize,
    pub prior: usize,
    pub bbox: GridBox,
    /// `σ(t_c)`
    pub confidence: f64,
    pub logit: f64,
}

/// `b_x = σ(t_x) + c_x`, `b_y = σ(t_y) + c_y`, `b_w = p_w e^{t_w}`, `b_h = p_h e^{t_h}`.
/// Returns whether the size exponents had to be clamped.
pub fn decode_one(t: [f64; 5], col: usize, row: usize, prior: (f64, f64)) -> (GridBox, bool) {
    let clamp = |v: f64| v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let clamped = t[2].abs() > MAX_LOG_SCALE || t[3].abs() > MAX_LOG_SCALE;
    let b = GridBox {
        x: sigmoid_scalar(t[0]) + col as f64,
        y: sigmoid_scalar(t[1]) + row as f64,
        w: prior.0 * clamp(t[2]).exp(),
        h: prior.1 * clamp(t[3]).exp(),
    };
    (b, clamped)
}

/// Decodes one sample's raw head output (`s * s * N * 5` values).
pub fn decode(raw: &[f32], s: usize, priors: &[(f64, f64)]) -> Result<Vec<DecodedBox>> {
    let n = priors.len();
    if raw.len() != s * s * n * 5 {
        return Err(RginError::InvalidArgument(format!(
            "raw output has {} values, expected {}",
            raw.len(),
            s * s * n * 5
        )));
    }
    let mut out = Vec::with_capacity(s * s * n);
    let mut clamped = 0;
    for row in 0..s {
        for col in 0..s {
            for (q, &prior) in priors.iter().enumerate() {
                let base = ((row * s + col) * n + q) * 5;
                let t: [f64; 5] = std::array::from_fn(|i| raw[base + i] as f64);
                if !t.iter().all(|v| v.is_finite()) {
                    return Err(RginError::InvalidArgument("non-finite prediction".into()));
                }
                let (bbox, c) = decode_one(t, col, row, prior);
                clamped += c as usize;
                out.push(DecodedBox {
                    row,
                    col,
                    prior: q,
                    bbox,
                    confidence: sigmoid_scalar(t[4]),
                    logit: t[4],
                });
            }
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} size exponents to ±{MAX_LOG_SCALE} while decoding");
    }
    Ok(out)
}

/// Highest confidence wins; ties go to the earliest (row, col, prior).
pub fn select_prediction(boxes: &[DecodedBox]) -> Option<&DecodedBox> {
    let mut best: Option<&DecodedBox> = None;
    for b in boxes {
        if best.map_or(true, |cur| b.logit > cur.logit) {
            best = Some(b);
        }
    }
    best
}

/// A responsible (cell, prior) entry and its regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub row: usize,
    pub col: usize,
    pub prior: usize,
    /// σ-space offsets of the centre inside the cell, the BCE targets.
    pub sigma: [f64; 2],
    /// Encoded `t*` that decodes back to the ground truth.
    pub t: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub positives: Vec<Positive>,
    /// `p*` over `s * s * N` entries, `(row, col, prior)` order.
    pub mask: Vec<bool>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(SIGMA_EPS, 1.0 - SIGMA_EPS);
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_one`] for a box whose centre lies in cell `(row, col)`.
pub fn encode(gt: &GridBox, col: usize, row: usize, prior: (f64, f64)) -> ([f64; 2], [f64; 4]) {
    let sx = gt.x - col as f64;
    let sy = gt.y - row as f64;
    let t = [
        logit(sx),
        logit(sy),
        (gt.w / prior.0).ln(),
        (gt.h / prior.1).ln(),
    ];
    ([sx, sy], t)
}

/// Prior-shaped boxes centred on the cell holding the ground-truth centre are
/// positive when their IoU with the ground truth exceeds 0.5; the best prior
/// there is always positive. Only that cell can decode to the ground truth.
pub fn assign_targets(gt: [f64; 4], priors: &[(f64, f64)], s: usize) -> Result<Assignment> {
    if priors.is_empty() {
        return Err(RginError::InvalidArgument("no priors".into()));
    }
    let g = GridBox::from_normalized(gt, s);
    let sf = s as f64;
    if !(g.w > 0.0 && g.h > 0.0) || !g.x.is_finite() || !g.y.is_finite() {
        return Err(RginError::InvalidArgument(format!("degenerate box {gt:?}")));
    }
    if !(0.0..=sf).contains(&g.x) || !(0.0..=sf).contains(&g.y) {
        return Err(RginError::InvalidArgument(format!(
            "box centre of {gt:?} outside the grid"
        )));
    }
    let col = (g.x.floor() as usize).min(s - 1);
    let row = (g.y.floor() as usize).min(s - 1);
    let n = priors.len();
    let mut mask = vec![false; s * s * n];
    let mut scores = Vec::with_capacity(n);
    for &(pw, ph) in priors {
        let placed = GridBox {
            x: col as f64 + 0.5,
            y: row as f64 + 0.5,
            w: pw,
            h: ph,
        };
        scores.push(iou(&placed, &g)?);
    }
    let best = (0..n).fold(0, |b, q| if scores[q] > scores[b] { q } else { b });
    let mut positives = Vec::new();
    for q in 0..n {
        if scores[q] > 0.5 || q == best {
            let (sigma, t) = encode(&g, col, row, priors[q]);
            positives.push(Positive {
                row,
                col,
                prior: q,
                sigma,
                t,
            });
            mask[(row * s + col) * n + q] = true;
        }
    }
    Ok(Assignment { positives, mask })
}

/// Detection loss on `raw: [batch, s * s, N * 5]`:
/// `2·mean BCE(t_x, t_y; σ*) + 2·mean smoothL1(t_w, t_h; t*)` over positives
/// (i.e. per-positive coordinate pairs, averaged) plus mean BCE of `t_c`
/// against `p*` over every entry, negatives weighted by `neg_weight`.
pub fn detection_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    raw: Var,
    assignments: &[Assignment],
    neg_weight: f64,
) -> Result<Var> {
    let shape = ctx.tape.shape(raw).to_vec();
    if shape.len() != 3 || shape[0] != assignments.len() || shape[2] % 5 != 0 {
        return Err(RginError::InvalidArgument(format!(
            "raw output {shape:?} does not match {} assignments",
            assignments.len()
        )));
    }
    let (cells, n) = (shape[1], shape[2] / 5);
    let per_sample = cells * n;
    let s = (cells as f64).sqrt().round() as usize;
    let mut xy_idx = Vec::new();
    let mut xy_target = Vec::new();
    let mut wh_idx = Vec::new();
    let mut wh_target = Vec::new();
    let mut conf_idx = Vec::with_capacity(assignments.len() * per_sample);
    let mut conf_target = Vec::with_capacity(assignments.len() * per_sample);
    let mut conf_weight = Vec::with_capacity(assignments.len() * per_sample);
    for (b, a) in assignments.iter().enumerate() {
        if a.mask.len() != per_sample {
            return Err(RginError::InvalidArgument(
                "assignment grid does not match predictions".into(),
            ));
        }
        if a.positives.is_empty() {
            return Err(RginError::InvalidArgument(format!(
                "sample {b} has no positive entry"
            )));
        }
        for p in &a.positives {
            let base = (b * per_sample + (p.row * s + p.col) * n + p.prior) * 5;
            xy_idx.extend([base, base + 1]);
            xy_target.extend(p.sigma.map(|v| T::lit(v.clamp(0.0, 1.0))));
            wh_idx.extend([base + 2, base + 3]);
            wh_target.extend([T::lit(p.t[2]), T::lit(p.t[3])]);
        }
        for (e, &pos) in a.mask.iter().enumerate() {
            conf_idx.push((b * per_sample + e) * 5 + 4);
            conf_target.push(if pos { T::one() } else { T::zero() });
            conf_weight.push(if pos { T::one() } else { T::lit(neg_weight) });
        }
    }
    let two = T::lit(2.0);
    let xy = ctx.tape.gather(raw, &xy_idx)?;
    let xy_t = Tensor::new(vec![xy_idx.len()], xy_target)?;
    let l_xy = ctx.tape.bce_with_logits(xy, &xy_t)?;
    let l_xy = ctx.tape.scale(l_xy, two)?;
    let wh = ctx.tape.gather(raw, &wh_idx)?;
    let wh_t = Tensor::new(vec![wh_idx.len()], wh_target)?;
    let l_wh = ctx.tape.smooth_l1(wh, &wh_t)?;
    let l_wh = ctx.tape.scale(l_wh, two)?;
    let conf = ctx.tape.gather(raw, &conf_idx)?;
    let conf_t = Tensor::new(vec![conf_idx.len()], conf_target)?;
    let l_conf = if neg_weight == 1.0 {
        ctx.tape.bce_with_logits(conf, &conf_t)?
    } else {
        let w = Tensor::new(vec![conf_idx.len()], conf_weight)?;
        ctx.tape.bce_with_logits_weighted(conf, &conf_t, &w)?
    };
    let boxes = ctx.tape.add(l_xy, l_wh)?;
    Ok(ctx.tape.add(boxes, l_conf)?)
}

/// `det + λ·att`.
pub fn total_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, det: Var, att: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(RginError::InvalidArgument(format!(
            "lambda {lambda} must be non-negative"
        )));
    }
    let weighted = ctx.tape.scale(att, T::lit(lambda))?;
    Ok(ctx.tape.add(det, weighted)?)
}
