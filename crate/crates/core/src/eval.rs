//! Precision@0.5 overall and per template class.

use std::fmt;

use rayon::prelude::*;
use rgin_synth::{Dataset, Split, TemplateClass};
use rgin_tensor::Tape;
use serde::Serialize;

use crate::backbone;
use crate::ctx::{Ctx, Mode};
use crate::data::{load_batch, pool, split_records, Batch};
use crate::error::Result;
use crate::head;
use crate::model::{box_iou, forward, loss, Model};

/// A prediction counts as correct when its IoU with the ground truth exceeds this.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    pub fn precision(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += hit as usize;
    }
}

/// Mean losses per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSummary {
    pub total: f64,
    pub det: f64,
    pub att: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: Score,
    /// In [`TemplateClass::ALL`] order.
    pub per_template: Vec<(TemplateClass, Score)>,
    pub loss: Option<LossSummary>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn template(&self, class: TemplateClass) -> Score {
        self.per_template
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, s)| *s)
            .unwrap_or_default()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.overall;
        writeln!(
            f,
            "overall      {:.4}  ({}/{})",
            o.precision(),
            o.correct,
            o.total
        )?;
        for (class, s) in &self.per_template {
            writeln!(
                f,
                "{:<12} {:.4}  ({}/{})",
                class.name(),
                s.precision(),
                s.correct,
                s.total
            )?;
        }
        if let Some(l) = self.loss {
            write!(f, "loss         {:.6} (det {:.6}", l.total, l.det)?;
            if let Some(a) = l.att {
                write!(f, ", att {a:.6}")?;
            }
            writeln!(f, ")")?;
        }
        Ok(())
    }
}

/// Scores predicted boxes against ground truth; all boxes normalised top-left.
pub fn score(predicted: &[[f64; 4]], gts: &[[f64; 4]], templates: &[TemplateClass]) -> EvalReport {
    assert_eq!(predicted.len(), gts.len());
    assert_eq!(predicted.len(), templates.len());
    let mut overall = Score::default();
    let mut per_template: Vec<(TemplateClass, Score)> = TemplateClass::ALL
        .iter()
        .map(|&c| (c, Score::default()))
        .collect();
    for ((p, g), t) in predicted.iter().zip(gts).zip(templates) {
        let hit = box_iou(*p, *g) > IOU_THRESHOLD;
        overall.add(hit);
        if let Some((_, s)) = per_template.iter_mut().find(|(c, _)| c == t) {
            s.add(hit);
        }
    }
    EvalReport {
        overall,
        per_template,
        loss: None,
    }
}

struct BatchResult {
    boxes: Vec<[f64; 4]>,
    /// Summed (not averaged) over the batch.
    loss: Option<(f64, f64, Option<f64>)>,
}

/// Eval-mode forward pass over one batch: selected boxes and, optionally, the
/// batch's summed losses.
fn run_batch(model: &Model, batch: &Batch, with_loss: bool) -> Result<BatchResult> {
    let cfg = &model.cfg;
    let s = cfg.grid();
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&mut tape, &model.params, &model.buffers, cfg, Mode::Eval);
    let x = backbone::image_batch::<f32>(&batch.image_refs(), cfg)?;
    let x = ctx.tape.constant(x);
    let out = forward(&mut ctx, cfg, x, &batch.tokens)?;
    let loss = if with_loss {
        let targets = batch.targets(&model.priors, s)?;
        let parts = loss(&mut ctx, cfg, &out, &targets)?;
        let n = batch.len() as f64;
        let v = |var| ctx.tape.value(var).data()[0] as f64 * n;
        Some((v(parts.total), v(parts.det), parts.att.map(v)))
    } else {
        None
    };
    let raw = ctx.tape.value(out.raw).data();
    let per = raw.len() / batch.len();
    let boxes = (0..batch.len())
        .map(|b| {
            let decoded = head::decode(&raw[b * per..(b + 1) * per], s, &model.priors)?;
            let sel = head::select_prediction(&decoded).expect("grid is non-empty");
            Ok(sel.bbox.to_normalized(s))
        })
        .collect::<Result<_>>()?;
    Ok(BatchResult { boxes, loss })
}

/// Evaluates `split`. Batches fan out over `threads` workers; counts and loss
/// sums are combined in batch order, so the report does not depend on the
/// thread count.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    batch: usize,
    threads: usize,
    with_loss: bool,
) -> Result<EvalReport> {
    let records = split_records(dataset, split);
    let chunks: Vec<_> = records.chunks(batch.max(1)).collect();
    let work = |chunk: &&[&rgin_synth::SceneRecord]| -> Result<(Batch, BatchResult)> {
        let b = load_batch(dataset, chunk, &model.vocab, model.cfg.max_tokens, 1)?;
        let r = run_batch(model, &b, with_loss)?;
        Ok((b, r))
    };
    let results: Vec<(Batch, BatchResult)> = if threads > 1 {
        pool(threads)?.install(|| chunks.par_iter().map(work).collect::<Result<_>>())?
    } else {
        chunks.iter().map(work).collect::<Result<_>>()?
    };
    let mut boxes = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    let mut templates = Vec::with_capacity(records.len());
    let mut sums = (0.0, 0.0, None::<f64>);
    for (b, r) in &results {
        boxes.extend_from_slice(&r.boxes);
        gts.extend_from_slice(&b.gts);
        templates.extend_from_slice(&b.templates);
        if let Some((t, d, a)) = r.loss {
            sums.0 += t;
            sums.1 += d;
            if let Some(a) = a {
                sums.2 = Some(sums.2.unwrap_or(0.0) + a);
            }
        }
    }
    let mut report = score(&boxes, &gts, &templates);
    if with_loss && !records.is_empty() {
        let n = records.len() as f64;
        report.loss = Some(LossSummary {
            total: sums.0 / n,
            det: sums.1 / n,
            att: sums.2.map(|a| a / n),
        });
    }
    Ok(report)
}
