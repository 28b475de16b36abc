//! Static PNG renderings: a longitudinal view with predicted centers marked,
//! and training-loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use stenosis_core::phantom::MprImage;
use stenosis_core::sampling::longitudinal_plane;

use crate::CliError;

const SCALE: u32 = 4;
const ORANGE: Rgb<u8> = Rgb([255, 140, 0]);
const TRUTH: Rgb<u8> = Rgb([200, 30, 30]);

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CliError::Runtime(format!("cannot encode {}: {e}", path.display())))?;
    stenosis_core::container::write_atomic(path, &bytes)?;
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn cross(img: &mut RgbImage, cx: i64, cy: i64, arm: i64, color: Rgb<u8>) {
    for d in -arm..=arm {
        for w in 0..2 {
            put(img, cx + d + w, cy + d, color);
            put(img, cx + d + w, cy - d, color);
        }
    }
}

/// Centerline runs left to right; a strip below the image shows the
/// annotation and orange crosses mark centers predicted significant.
pub fn render_prediction(
    image: &MprImage<f32>,
    centers: &[usize],
    predicted: &[bool],
    path: &Path,
) -> Result<(), CliError> {
    let plane = longitudinal_plane(image);
    let (len, size) = plane.dim();
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let strip = 3 * SCALE;
    let mut img = RgbImage::new(len as u32 * SCALE, size as u32 * SCALE + strip);
    for z in 0..len {
        for x in 0..size {
            let g = (((plane[[z, x]] - lo) / span) * 255.0).round() as u8;
            for dz in 0..SCALE {
                for dx in 0..SCALE {
                    img.put_pixel(z as u32 * SCALE + dz, x as u32 * SCALE + dx, Rgb([g, g, g]));
                }
            }
        }
        if image.labels[z] {
            for dz in 0..SCALE {
                for dy in 0..strip {
                    img.put_pixel(z as u32 * SCALE + dz, size as u32 * SCALE + dy, TRUTH);
                }
            }
        }
    }
    let axis = (image.axis_index() as u32 * SCALE + SCALE / 2) as i64;
    for (&c, &p) in centers.iter().zip(predicted) {
        if p {
            cross(&mut img, (c as u32 * SCALE + SCALE / 2) as i64, axis, 4, ORANGE);
        }
    }
    save(&img, path)
}

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// One polyline per fold, epochs on x and loss on y (shared scale).
pub fn render_curves(curves: &[Vec<f64>], path: &Path) -> Result<(), CliError> {
    let (w, h, pad) = (640u32, 320u32, 20i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let epochs = curves.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let top = curves
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let to_px = |i: usize, v: f64| {
        let x = pad + (i as f64 / (epochs - 1) as f64 * (w as i64 - 2 * pad) as f64) as i64;
        let y = h as i64 - pad - (v / top * (h as i64 - 2 * pad) as f64) as i64;
        (x, y)
    };
    for x in pad..w as i64 - pad {
        put(&mut img, x, h as i64 - pad, Rgb([0, 0, 0]));
    }
    for y in pad..h as i64 - pad {
        put(&mut img, pad, y, Rgb([0, 0, 0]));
    }
    for (k, curve) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, pair) in curve.windows(2).enumerate() {
            let (x0, y0) = to_px(i, pair[0]);
            let (x1, y1) = to_px(i + 1, pair[1]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                put(
                    &mut img,
                    x0 + (x1 - x0) * s / steps,
                    y0 + (y1 - y0) * s / steps,
                    color,
                );
            }
        }
    }
    save(&img, path)
}
