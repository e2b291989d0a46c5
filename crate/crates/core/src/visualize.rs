//! Per-scene image dumps: boxes over the scene, attention heatmaps and a text
//! sidecar with the AFS weights.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rgin_synth::{encode_png, Dataset, SceneRecord};

use crate::error::{Result, RginError};
use crate::model::{box_iou, Model};

const GREEN: [u8; 3] = [40, 220, 60];
const RED: [u8; 3] = [230, 30, 30];

/// Draws the 1-pixel outline of a normalised top-left box.
pub fn draw_box(rgb: &mut [u8], canvas: usize, bbox: [f64; 4], color: [u8; 3]) {
    let c = canvas as f64;
    let clamp = |v: f64| (v * c).round().clamp(0.0, c - 1.0) as usize;
    let (x0, y0) = (clamp(bbox[0]), clamp(bbox[1]));
    let (x1, y1) = (clamp(bbox[0] + bbox[2]), clamp(bbox[1] + bbox[3]));
    let mut put = |x: usize, y: usize| rgb[(y * canvas + x) * 3..][..3].copy_from_slice(&color);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Grayscale RGB image of an `s × s` grid, nearest-neighbour upsampled to
/// `canvas × canvas` and scaled so the largest value is white.
pub fn heatmap(grid: &[f64], s: usize, canvas: usize) -> Vec<u8> {
    let max = grid.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(canvas * canvas * 3);
    for y in 0..canvas {
        for x in 0..canvas {
            let v = grid[(y * s / canvas) * s + x * s / canvas];
            let g = if max > 0.0 {
                (255.0 * v / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.extend([g, g, g]);
        }
    }
    out
}

fn write_png(path: &Path, rgb: &[u8], canvas: usize) -> Result<()> {
    let bytes = encode_png(rgb, canvas as u32, canvas as u32)
        .map_err(|e| RginError::InvalidArgument(format!("png encoding: {e}")))?;
    std::fs::write(path, bytes).map_err(|e| RginError::io(path, e))
}

/// Writes, for each scene id, `scene_<id>.png` (ground truth green,
/// prediction red), `scene_<id>_head<j>.png` per GARAN head and
/// `scene_<id>.txt`. Returns every file written.
pub fn visualize(
    model: &Model,
    dataset: &Dataset,
    scene_ids: &[u64],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| RginError::io(out_dir, e))?;
    let canvas = model.cfg.canvas;
    let s = model.cfg.grid();
    let mut files = Vec::new();
    for &id in scene_ids {
        let record: &SceneRecord = dataset
            .records
            .iter()
            .find(|r| r.scene_id == id)
            .ok_or_else(|| RginError::InvalidArgument(format!("no scene with id {id}")))?;
        let mut rgb = dataset.load_image(record)?;
        let pred = model.predict(&[&rgb], &[&record.expression])?.remove(0);
        let gt = record.gt_box.map(|v| v as f64);
        draw_box(&mut rgb, canvas, gt, GREEN);
        draw_box(&mut rgb, canvas, pred.bbox, RED);
        let path = out_dir.join(format!("scene_{id}.png"));
        write_png(&path, &rgb, canvas)?;
        files.push(path);

        for (j, (a_c, _)) in pred.attention.iter().enumerate() {
            let path = out_dir.join(format!("scene_{id}_head{j}.png"));
            write_png(&path, &heatmap(a_c, s, canvas), canvas)?;
            files.push(path);
        }

        let mut text = String::new();
        let _ = writeln!(text, "scene {id}");
        let _ = writeln!(text, "split {}", record.split.name());
        let _ = writeln!(text, "template {}", record.template.name());
        let _ = writeln!(text, "expression {}", record.expression);
        let _ = writeln!(
            text,
            "gt {:.6} {:.6} {:.6} {:.6}",
            gt[0], gt[1], gt[2], gt[3]
        );
        let p = pred.bbox;
        let _ = writeln!(text, "pred {:.6} {:.6} {:.6} {:.6}", p[0], p[1], p[2], p[3]);
        let _ = writeln!(text, "confidence {:.6}", pred.selected.confidence);
        let _ = writeln!(text, "iou {:.6}", box_iou(gt, p));
        match pred.beta {
            Some(b) => {
                let _ = writeln!(text, "beta {:.9} {:.9} {:.9}", b[0], b[1], b[2]);
            }
            None => {
                let _ = writeln!(text, "beta none");
            }
        }
        let path = out_dir.join(format!("scene_{id}.txt"));
        std::fs::write(&path, text).map_err(|e| RginError::io(&path, e))?;
        files.push(path);
    }
    Ok(files)
}
