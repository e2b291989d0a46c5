//! Full forward pass and loss assembly.

use rgin_tensor::{Scalar, Tape, Tensor, Var};

use crate::afs;
use crate::backbone;
use crate::config::ModelConfig;
use crate::ctx::{Ctx, Mode};
use crate::error::{Result, RginError};
use crate::garan::{self, HeadState};
use crate::head::{self, Assignment};
use crate::params::{init_params, Params};
use crate::text;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone)]
pub struct Outputs {
    /// `[batch, s * s, N * 5]`
    pub raw: Var,
    /// AFS weights `[batch, 3]` when AFS is enabled.
    pub beta: Option<Var>,
    pub heads: Vec<HeadState>,
    pub f_t: Var,
}

/// Image `[batch, canvas, canvas, c]` and token ids → raw box predictions.
pub fn forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: Var,
    tokens: &[Vec<usize>],
) -> Result<Outputs> {
    if ctx.tape.shape(images)[0] != tokens.len() {
        return Err(RginError::InvalidArgument(
            "image and expression counts differ".into(),
        ));
    }
    let f_t = text::encode(ctx, cfg, tokens)?;
    let feats = backbone::extract(ctx, cfg, images)?;
    let maps = backbone::project(ctx, cfg, &feats)?;
    let (f_v, beta) = if cfg.enable_afs {
        let beta = afs::predict_weights(ctx, f_t)?;
        (afs::fuse(ctx, &maps, beta)?, Some(beta))
    } else {
        (maps[0], None)
    };
    let (f_v, heads) = if cfg.enable_garan {
        garan::garan_forward(ctx, cfg, f_v, f_t)?
    } else {
        (f_v, Vec::new())
    };
    let f_m = head::fuse_multimodal(ctx, f_v, f_t)?;
    let raw = head::predict_raw(ctx, f_m)?;
    Ok(Outputs {
        raw,
        beta,
        heads,
        f_t,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub det: Var,
    /// Reported whenever GARAN runs, even if excluded from the total.
    pub att: Option<Var>,
}

/// Per-sample supervision.
#[derive(Debug, Clone)]
pub struct Targets {
    pub assignment: Assignment,
    /// Placement-IoU attention targets, `s * s`.
    pub attention: Vec<f64>,
}

pub fn targets_for(gt: [f64; 4], priors: &[(f64, f64)], s: usize) -> Result<Targets> {
    Ok(Targets {
        assignment: head::assign_targets(gt, priors, s)?,
        attention: garan::attention_targets(gt, s)?,
    })
}

pub fn loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    out: &Outputs,
    targets: &[Targets],
) -> Result<LossParts> {
    let assignments: Vec<Assignment> = targets.iter().map(|t| t.assignment.clone()).collect();
    let det = head::detection_loss(ctx, out.raw, &assignments, cfg.neg_weight)?;
    if out.heads.is_empty() {
        return Ok(LossParts {
            total: det,
            det,
            att: None,
        });
    }
    let s2 = cfg.grid() * cfg.grid();
    let att_t = Tensor::new(
        vec![targets.len(), s2],
        targets
            .iter()
            .flat_map(|t| t.attention.iter().map(|&v| T::lit(v)))
            .collect(),
    )?;
    let att = garan::attention_loss(ctx, &out.heads, &att_t, cfg.supervise_diffuse)?;
    let lambda = if cfg.enable_att_loss { cfg.lambda } else { 0.0 };
    let total = head::total_loss(ctx, det, att, lambda)?;
    Ok(LossParts {
        total,
        det,
        att: Some(att),
    })
}

/// Trained weights plus everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    /// Box-shape priors in grid units, ascending area. Held at f32 precision,
    /// as checkpoints store them.
    pub priors: Vec<(f64, f64)>,
    pub params: Params<f32>,
    /// Batch-norm running statistics.
    pub buffers: Params<f32>,
}

/// One sample's inference result.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub selected: head::DecodedBox,
    /// Normalised top-left `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub beta: Option<[f64; 3]>,
    /// Per head `(a_c, α_d)` grids.
    pub attention: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Model {
    pub fn new(cfg: ModelConfig, priors: Vec<(f64, f64)>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if priors.len() != cfg.priors {
            return Err(RginError::InvalidArgument(format!(
                "{} priors given, config wants {}",
                priors.len(),
                cfg.priors
            )));
        }
        let vocab = Vocabulary::synthetic();
        let (params, buffers) = init_params(&cfg, vocab.size(), seed);
        let priors = priors
            .into_iter()
            .map(|(w, h)| (w as f32 as f64, h as f32 as f64))
            .collect();
        Ok(Model {
            cfg,
            vocab,
            priors,
            params,
            buffers,
        })
    }

    pub fn tokens(&self, expression: &str) -> Result<Vec<usize>> {
        Ok(tokenize(expression, &self.vocab, self.cfg.max_tokens)?.ids)
    }

    /// Eval-mode inference on 8-bit RGB images.
    pub fn predict(&self, images: &[&[u8]], expressions: &[&str]) -> Result<Vec<Prediction>> {
        let tokens: Vec<Vec<usize>> = expressions
            .iter()
            .map(|e| self.tokens(e))
            .collect::<Result<_>>()?;
        let mut tape = Tape::<f32>::new();
        let mut ctx = Ctx::new(
            &mut tape,
            &self.params,
            &self.buffers,
            &self.cfg,
            Mode::Eval,
        );
        let x = backbone::image_batch::<f32>(images, &self.cfg)?;
        let x = ctx.tape.constant(x);
        let out = forward(&mut ctx, &self.cfg, x, &tokens)?;
        let s = self.cfg.grid();
        let raw = ctx.tape.value(out.raw).data();
        let per = raw.len() / images.len();
        let mut preds = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let boxes = head::decode(&raw[b * per..(b + 1) * per], s, &self.priors)?;
            let selected = *head::select_prediction(&boxes).expect("grid is non-empty");
            let beta = out.beta.map(|v| {
                let d = &ctx.tape.value(v).data()[b * 3..b * 3 + 3];
                [d[0] as f64, d[1] as f64, d[2] as f64]
            });
            let grid = |v: Var| -> Vec<f64> {
                ctx.tape.value(v).data()[b * s * s..(b + 1) * s * s]
                    .iter()
                    .map(|&x| x as f64)
                    .collect()
            };
            let attention = out
                .heads
                .iter()
                .map(|h| (grid(h.a_c), grid(h.alpha)))
                .collect();
            preds.push(Prediction {
                selected,
                bbox: selected.bbox.to_normalized(s),
                beta,
                attention,
            });
        }
        Ok(preds)
    }
}

/// Intersection over union of two normalised top-left boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}
