use rgin_tensor::Tensor;

use crate::scene::{PixelBox, Scene, ShapeKind, BACKGROUND};

fn quantize(c: [f32; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Whether the pixel centred at `(px, py)` lies inside the shape drawn in `b`.
pub fn covers(shape: ShapeKind, b: &PixelBox, px: f32, py: f32) -> bool {
    if px < b.x || px > b.x + b.w || py < b.y || py > b.y + b.h {
        return false;
    }
    let (cx, cy) = b.center();
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let (rx, ry) = (b.w / 2.0, b.h / 2.0);
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            dx * dx + dy * dy <= 1.0
        }
        // apex at top centre, base along the bottom edge
        ShapeKind::Triangle => (px - cx).abs() <= (py - b.y) / b.h * b.w / 2.0,
    }
}

/// Hard-edged 8-bit RGB raster, row-major `[y][x][c]`. Later objects paint over
/// earlier ones, though generated scenes never overlap.
pub fn render_rgb8(scene: &Scene) -> Vec<u8> {
    let n = scene.canvas as usize;
    let bg = quantize(BACKGROUND);
    let mut img: Vec<u8> = bg.iter().copied().cycle().take(n * n * 3).collect();
    for o in &scene.objects {
        let rgb = quantize(o.color.rgb());
        let x0 = o.bbox.x.floor().max(0.0) as usize;
        let y0 = o.bbox.y.floor().max(0.0) as usize;
        let x1 = ((o.bbox.x + o.bbox.w).ceil() as usize).min(n);
        let y1 = ((o.bbox.y + o.bbox.h).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(o.shape, &o.bbox, x as f32 + 0.5, y as f32 + 0.5) {
                    img[(y * n + x) * 3..][..3].copy_from_slice(&rgb);
                }
            }
        }
    }
    img
}

/// `[canvas, canvas, 3]` image in `[0, 1]`; equals the stored PNG divided by 255.
pub fn render(scene: &Scene) -> Tensor<f32> {
    rgb8_to_tensor(&render_rgb8(scene), scene.canvas as usize)
}

pub fn rgb8_to_tensor(rgb: &[u8], canvas: usize) -> Tensor<f32> {
    assert_eq!(rgb.len(), canvas * canvas * 3, "raster size");
    Tensor::new(
        vec![canvas, canvas, 3],
        rgb.iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("canvas is positive")
}
