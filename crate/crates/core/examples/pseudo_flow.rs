//! Pseudo optical flow and motion masks from attention, on analytic
//! attention that follows a sliding square (no model involved).
//!
//! cargo run --release --example pseudo_flow

use savekit::fixtures::MovingShape;
use savekit::pseudo_flow::{compute_pseudo_flow, extract_motion_masks, mask_iou, AggregatedAttention, MaskConfig};
use savekit::tensor::Tensor;

fn main() -> savekit::Result<()> {
    let shape = MovingShape { frames: 6, size: 8.0, step: 4.0, ..MovingShape::default() };
    let (h, w) = (16, 16);
    let p = h * w;
    let shift_per_frame = shape.step * h as f64 / shape.height as f64;

    // each query on the square attends around where it was in frame 0
    let mut maps = Vec::new();
    for i in 1..shape.frames {
        let occupied = shape.occupancy(i, h, w);
        let mut m = vec![0.0; p * p];
        for q in 0..p {
            let (r, c) = ((q / w) as f64, (q % w) as f64);
            let src_c = if occupied[q] { c - shift_per_frame * i as f64 } else { c };
            let row = &mut m[q * p..(q + 1) * p];
            for (k, v) in row.iter_mut().enumerate() {
                let (kr, kc) = ((k / w) as f64, (k % w) as f64);
                *v = (-((kr - r).powi(2) + (kc - src_c).powi(2)) / 0.5).exp();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        maps.push(vec![(0, Tensor::new(&[p, p], m)?)]);
    }
    let agg = AggregatedAttention { grid: (h, w), frames: shape.frames, maps };
    let config = MaskConfig::default();
    let field = compute_pseudo_flow(&agg, &config.flow);
    let masks = extract_motion_masks(&field, config.quantile, config.floor, config.smooth_radius)?;

    for i in 1..shape.frames {
        let d = field.frame_distances(i - 1);
        let iou = mask_iou(masks.frame(i), &shape.moving_region(i, h, w));
        println!("frame {}: max displacement {:.3}, mask IoU {iou:.3}", i + 1, d.iter().cloned().fold(0.0, f64::max));
    }
    println!("\nmask of the last frame:");
    let last = masks.frame(shape.frames - 1);
    for r in 0..h {
        let line: String = (0..w).map(|c| if last[r * w + c] > 0.5 { '#' } else { '.' }).collect();
        println!("  {line}");
    }
    Ok(())
}
