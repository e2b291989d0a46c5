use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SynthError};

/// IoU of two boxes sharing a centre; only their shapes matter.
pub fn shape_iou(a: (f32, f32), b: (f32, f32)) -> f32 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn nearest(b: (f32, f32), centroids: &[(f32, f32)]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = 1.0 - shape_iou(b, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// K-means over box shapes `(w, h)` with `1 - IoU` as the distance. Seeded
/// k-means++ initialisation over the distinct shapes; result sorted by area.
pub fn fit_priors(boxes: &[(f32, f32)], n: usize, seed: u64) -> Result<Vec<(f32, f32)>> {
    if n == 0 {
        return Err(SynthError::InvalidArgument(
            "prior count must be positive".into(),
        ));
    }
    if boxes.is_empty() {
        return Err(SynthError::InvalidArgument(
            "no boxes to fit priors on".into(),
        ));
    }
    if let Some(b) = boxes
        .iter()
        .find(|b| !(b.0 > 0.0 && b.1 > 0.0 && b.0.is_finite() && b.1.is_finite()))
    {
        return Err(SynthError::InvalidArgument(format!(
            "degenerate box shape {b:?}"
        )));
    }
    let mut distinct: Vec<(f32, f32)> = boxes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if distinct.len() == 1 {
        log::warn!(
            "all {} boxes share one shape; returning {n} identical priors",
            boxes.len()
        );
        return Ok(vec![distinct[0]; n]);
    }
    if distinct.len() < n {
        return Err(SynthError::InvalidArgument(format!(
            "{} distinct box shapes cannot support {n} priors",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![distinct[rng.gen_range(0..distinct.len())]];
    while centroids.len() < n {
        let weights: Vec<f32> = distinct
            .iter()
            .map(|&b| nearest(b, &centroids).1.powi(2))
            .collect();
        let total: f32 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f32>() * total;
            weights
                .iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0 && w > 0.0
                })
                .unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every distinct shape already coincides with a centroid
            distinct
                .iter()
                .position(|b| !centroids.contains(b))
                .unwrap()
        };
        centroids.push(distinct[pick]);
    }

    let mut assignment = vec![usize::MAX; boxes.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (slot, &b) in assignment.iter_mut().zip(boxes) {
            let (c, _) = nearest(b, &centroids);
            changed |= *slot != c;
            *slot = c;
        }
        if !changed {
            break;
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let (mut sw, mut sh, mut count) = (0.0f64, 0.0f64, 0usize);
            for (&a, &b) in assignment.iter().zip(boxes) {
                if a == j {
                    sw += b.0 as f64;
                    sh += b.1 as f64;
                    count += 1;
                }
            }
            // an emptied cluster keeps its previous centroid
            if count > 0 {
                *c = ((sw / count as f64) as f32, (sh / count as f64) as f32);
            }
        }
    }
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centroids)
}
