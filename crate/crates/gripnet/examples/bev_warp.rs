//! The bird's-eye-view preprocessing path: paint a perspective camera
//! frame with a road receding toward the horizon, lift the road
//! quadrilateral into a top-down square with a homography warp, and run
//! the full preprocessing used in front of the network.
//!
//! ```text
//! cargo run --example bev_warp
//! ```

use gripnet::data::bev::{bev_warp, BevCrop, ImageF32};
use gripnet::data::{channel_stats, preprocess, to_square};
use gripnet::Result;

/// The road region in the painted frame: narrow at the top (far away),
/// wide at the bottom (near the camera).
const CORNERS: [[f64; 2]; 4] = [[84.0, 48.0], [124.0, 48.0], [176.0, 112.0], [24.0, 112.0]];

fn main() -> Result<()> {
    let frame = paint_frame(200, 120);
    println!("painted a {}x{} camera frame; road corners {:?}", frame.width(), frame.height(), CORNERS);

    // Lift the quadrilateral to a 64x64 top-down square.
    let crop = BevCrop { corners: CORNERS, output_size: 64 };
    let top_down = bev_warp(&frame, &crop)?;

    // The warp pins the four output corners to the four source corners
    // exactly; everything between is bilinear resampling.
    println!("\ncorner fidelity (output corner vs source corner, red channel):");
    let out_corners = [(0usize, 0usize), (63, 0), (63, 63), (0, 63)];
    for (i, &(u, v)) in out_corners.iter().enumerate() {
        let src = frame.sample_bilinear(CORNERS[i][0], CORNERS[i][1]);
        let dst = top_down.pixel(u, v);
        println!(
            "  corner {i}: source {:.4} -> output({u:>2},{v:>2}) {:.4}, diff {:.1e}",
            src[0],
            dst[0],
            (src[0] - dst[0]).abs()
        );
    }

    // In the camera frame the road occupies a trapezoid; in the output
    // it fills the whole square, so the asphalt texture is sampled at a
    // uniform ground resolution. Sketch both to see the straightening.
    println!("\ncamera frame (red channel):");
    sketch(&frame);
    println!("\ntop-down warp:");
    sketch(&top_down);

    // The same crop drives the one-call preprocessing path: warp (one
    // resampling, straight to the network size), planar layout, then
    // per-channel standardisation with training-split statistics.
    let square = to_square(&frame, Some(&crop), 32)?;
    let raw = vec![square.to_chw()];
    let (mean, std) = channel_stats(&raw, 3)?;
    let net_input = preprocess(&frame, Some(&crop), 32, &mean, &std)?;
    let m: f32 = net_input.iter().sum::<f32>() / net_input.len() as f32;
    let v: f32 = net_input.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / net_input.len() as f32;
    println!(
        "\npreprocessed tensor: {} values ([3, 32, 32]), mean {:.2e}, std {:.4}",
        net_input.len(),
        m,
        v.sqrt()
    );
    Ok(())
}

/// Paints sky, roadside grass, and an asphalt trapezoid whose dashed
/// centre line recedes toward the horizon.
fn paint_frame(width: usize, height: usize) -> ImageF32 {
    let (top_y, bot_y) = (CORNERS[0][1], CORNERS[2][1]);
    let mut img = ImageF32::constant(width, height, [0.0; 3]).expect("frame allocation");
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut rgb = if yf < top_y {
                [0.55, 0.70, 0.90] // sky
            } else {
                [0.25, 0.55, 0.25] // grass
            };
            if yf >= top_y && yf <= bot_y {
                // Span of the road at this row, interpolated between the
                // top and bottom edges of the quadrilateral.
                let t = (yf - top_y) / (bot_y - top_y);
                let left = CORNERS[0][0] + t * (CORNERS[3][0] - CORNERS[0][0]);
                let right = CORNERS[1][0] + t * (CORNERS[2][0] - CORNERS[1][0]);
                if xf >= left && xf <= right {
                    let s = (xf - left) / (right - left);
                    rgb = [0.30 + 0.25 * s, 0.30 + 0.25 * s, 0.32 + 0.25 * s];
                    // Dashed centre line, thinner with distance.
                    let half_width = 0.012 + 0.018 * t;
                    if (s - 0.5).abs() < half_width && (t * 8.0).fract() < 0.5 {
                        rgb = [0.95, 0.95, 0.85];
                    }
                }
            }
            img.set_pixel(x, y, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
        }
    }
    img
}

/// Prints a small luminance sketch of an image to the terminal.
fn sketch(img: &ImageF32) {
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let (rows, cols) = (12, 40);
    for r in 0..rows {
        let mut line = String::from("  ");
        for c in 0..cols {
            let x = c as f64 / (cols - 1) as f64 * (img.width() - 1) as f64;
            let y = r as f64 / (rows - 1) as f64 * (img.height() - 1) as f64;
            let p = img.sample_bilinear(x, y);
            let lum = (0.3 * p[0] + 0.6 * p[1] + 0.1 * p[2]).clamp(0.0, 1.0);
            line.push(shades[((lum * 9.0).round() as usize).min(9)]);
        }
        println!("{line}");
    }
}
