//! Batches from a generated dataset. Images are decoded from PNG when a batch
//! is assembled, so only one batch of pixels is resident at a time.

use rayon::prelude::*;
use rgin_synth::{fit_priors, Dataset, SceneRecord, Split, TemplateClass};

use crate::error::{Result, RginError};
use crate::model::{targets_for, Targets};
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone)]
pub struct Batch {
    pub scene_ids: Vec<u64>,
    /// 8-bit RGB, `canvas * canvas * 3` each.
    pub images: Vec<Vec<u8>>,
    pub tokens: Vec<Vec<usize>>,
    /// Normalised top-left `[x, y, w, h]`.
    pub gts: Vec<[f64; 4]>,
    pub templates: Vec<TemplateClass>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&[u8]> {
        self.images.iter().map(Vec::as_slice).collect()
    }

    pub fn targets(&self, priors: &[(f64, f64)], s: usize) -> Result<Vec<Targets>> {
        self.gts
            .iter()
            .map(|&g| targets_for(g, priors, s))
            .collect()
    }
}

fn gt_of(r: &SceneRecord) -> [f64; 4] {
    r.gt_box.map(|v| v as f64)
}

/// Loads and tokenises `records`. With `threads > 1` the PNG decoding fans out
/// over a pool; the result order always follows `records`.
pub fn load_batch(
    dataset: &Dataset,
    records: &[&SceneRecord],
    vocab: &Vocabulary,
    max_tokens: usize,
    threads: usize,
) -> Result<Batch> {
    let images: Vec<Vec<u8>> = if threads > 1 {
        let pool = pool(threads)?;
        pool.install(|| {
            records
                .par_iter()
                .map(|r| dataset.load_image(r))
                .collect::<std::result::Result<_, _>>()
        })?
    } else {
        records
            .iter()
            .map(|r| dataset.load_image(r))
            .collect::<std::result::Result<_, _>>()?
    };
    let tokens = records
        .iter()
        .map(|r| tokenize(&r.expression, vocab, max_tokens).map(|t| t.ids))
        .collect::<Result<_>>()?;
    Ok(Batch {
        scene_ids: records.iter().map(|r| r.scene_id).collect(),
        images,
        tokens,
        gts: records.iter().map(|r| gt_of(r)).collect(),
        templates: records.iter().map(|r| r.template).collect(),
    })
}

pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RginError::InvalidArgument(format!("thread pool: {e}")))
}

/// Fits `n` box-shape priors, in grid units for an `s × s` grid, to the
/// training split's ground-truth boxes.
pub fn dataset_priors(dataset: &Dataset, n: usize, s: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let shapes: Vec<(f32, f32)> = dataset
        .split(Split::Train)
        .map(|r| (r.gt_box[2] * s as f32, r.gt_box[3] * s as f32))
        .collect();
    let priors = fit_priors(&shapes, n, seed)?;
    Ok(priors
        .into_iter()
        .map(|(w, h)| (w as f64, h as f64))
        .collect())
}

/// Scene records of one split, in file order.
pub fn split_records(dataset: &Dataset, split: Split) -> Vec<&SceneRecord> {
    dataset.split(split).collect()
}
