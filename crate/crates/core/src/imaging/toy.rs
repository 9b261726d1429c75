//! Procedural aligned optical/thermal pairs.

use super::degrade::gaussian_blur_plane;
use super::{ImagePlane, ImageRGB};
use crate::error::{ensure, Result};
use crate::numcore::SeededRng;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

/// Thermal intensity as a monotone remap of optical luminance.
fn thermal_remap(lum: f64) -> f64 {
    0.1 + 0.8 * lum.clamp(0.0, 1.0).powf(0.8)
}

/// Random rectangles and disks over a linear gradient background; the
/// thermal plane is a luminance remap of the same scene, blurred.
pub fn generate_toy_pair(rng: &mut SeededRng, h: usize, w: usize) -> Result<(ImageRGB, ImagePlane)> {
    ensure!(
        h > 0 && w > 0 && h.is_multiple_of(8) && w.is_multiple_of(8),
        "generate_toy_pair",
        "dims {h}x{w} must be positive multiples of 8"
    );
    let (hf, wf) = (h as f64, w as f64);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(0.1, 0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(0.1, 0.9));
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());

    let n_shapes = 4 + rng.below(6) as usize;
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.uniform());
        let shape = if rng.uniform() < 0.5 {
            let sh = rng.uniform_in(0.1, 0.4) * hf;
            let sw = rng.uniform_in(0.1, 0.4) * wf;
            let y0 = rng.uniform_in(0.0, hf - sh);
            let x0 = rng.uniform_in(0.0, wf - sw);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        } else {
            let r = rng.uniform_in(0.05, 0.2) * hf.min(wf);
            Shape::Disk {
                cy: rng.uniform_in(0.0, hf),
                cx: rng.uniform_in(0.0, wf),
                r,
            }
        };
        shapes.push((shape, color));
    }

    let mut optical = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (((py / hf - 0.5) * dy + (px / wf - 0.5) * dx) + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            let mut c: [f64; 3] = std::array::from_fn(|i| c0[i] + (c1[i] - c0[i]) * t);
            // later shapes paint over earlier ones
            for (shape, color) in &shapes {
                if shape.contains(py, px) {
                    c = *color;
                }
            }
            optical.extend_from_slice(&c);
        }
    }
    let optical = ImageRGB::new(h, w, optical)?;
    let lum = optical.luminance();
    let remapped = ImagePlane::new(h, w, lum.data.iter().map(|&l| thermal_remap(l)).collect())?;
    let thermal = gaussian_blur_plane(&remapped, 5, 1.0).clamp01();
    Ok((optical, thermal))
}

fn sobel(img: &ImagePlane) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img.data[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Fraction of strong thermal gradients (top decile of the nonzero Sobel
/// magnitudes) that have an optical-luminance edge within `radius` pixels.
pub fn edge_overlap_fraction(optical: &ImageRGB, thermal: &ImagePlane, radius: usize) -> f64 {
    let (h, w) = (thermal.height, thermal.width);
    let tg = sobel(thermal);
    let og = sobel(&optical.luminance());
    let mut sorted: Vec<f64> = tg.iter().copied().filter(|&v| v > 1e-6).collect();
    if sorted.is_empty() {
        return 1.0;
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let threshold = sorted[sorted.len() * 9 / 10];
    let optical_edge = 0.05;
    let r = radius as isize;
    let (mut strong, mut hit) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if tg[y * w + x] < threshold {
                continue;
            }
            strong += 1;
            let near = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && og[yy as usize * w + xx as usize] > optical_edge
                })
            });
            hit += near as usize;
        }
    }
    hit as f64 / strong as f64
}
