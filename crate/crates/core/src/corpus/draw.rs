//! Raster primitives shared by the glyph, lip and scene renderers. Images are
//! `[3, H, W]` with pixel centers at half-integer coordinates.

use crate::autodiff::Tensor;
use crate::rng::Rng;

/// Distance from `p` to the segment `a–b`.
pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// One-pixel-wide linear coverage ramp at a signed distance from an edge
/// (positive inside).
pub fn coverage(inside_px: f64) -> f64 {
    (inside_px + 0.5).clamp(0.0, 1.0)
}

/// Blends `color` into pixel `(y, x)` with weight `alpha`.
pub fn blend(img: &mut Tensor, y: usize, x: usize, color: [f64; 3], alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data_mut();
    for (c, &col) in color.iter().enumerate() {
        let v = &mut d[c * h * w + y * w + x];
        *v = *v * (1.0 - alpha) + col * alpha;
    }
}

/// Textured background: a per-image base color, a low-frequency wave and
/// per-pixel noise.
pub fn textured_background(h: usize, w: usize, base: (f64, f64), rng: &mut Rng) -> Tensor {
    let color: Vec<f64> = (0..3).map(|_| rng.uniform(base.0, base.1)).collect();
    let fx = rng.uniform(0.5, 3.0) * std::f64::consts::TAU / w as f64;
    let fy = rng.uniform(0.5, 3.0) * std::f64::consts::TAU / h as f64;
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let amp = rng.uniform(0.02, 0.06);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let wave = amp * (fx * x as f64 + fy * y as f64 + phase + c as f64).sin();
                let noise = rng.uniform(-0.04, 0.04);
                data[c * h * w + y * w + x] = (color[c] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w]).expect("non-empty canvas")
}

/// Fills an axis-aligned rectangle covering `fraction` of the image area with
/// a flat random color.
pub fn occlude(img: &mut Tensor, fraction: f64, rng: &mut Rng) {
    if fraction <= 0.0 {
        return;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let area = fraction * (h * w) as f64;
    let ratio = rng.uniform(0.5, 2.0);
    let rh = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let y0 = rng.index(h - rh + 1);
    let x0 = rng.index(w - rw + 1);
    let color = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            blend(img, y, x, color, 1.0);
        }
    }
}

fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Directional box blur: every pixel becomes the mean of bilinear samples
/// spaced at most one pixel apart along a `length`-pixel segment at `angle`.
pub fn motion_blur(img: &Tensor, length: f64, angle: f64) -> Tensor {
    if length <= 0.0 {
        return img.clone();
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n = length.ceil() as usize;
    let (dy, dx) = (angle.sin() * length, angle.cos() * length);
    let offsets: Vec<(f64, f64)> = (0..=n)
        .map(|k| {
            let s = k as f64 / n as f64 - 0.5;
            (s * dy, s * dx)
        })
        .collect();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let plane = &img.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let acc: f64 = offsets.iter().map(|(oy, ox)| sample_clamped(plane, h, w, py + oy, px + ox)).sum();
                out[c * h * w + y * w + x] = acc / offsets.len() as f64;
            }
        }
    }
    Tensor::from_vec(out, &[3, h, w]).expect("same shape")
}

/// Filled ellipse centered at `(cy, cx)` with semi-axes `(ry, rx)`.
pub fn fill_ellipse(img: &mut Tensor, center: (f64, f64), radii: (f64, f64), color: [f64; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = center;
    let (ry, rx) = radii;
    if ry <= 0.0 || rx <= 0.0 {
        return;
    }
    let m = ry.min(rx);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            let r = (u * u + v * v).sqrt();
            blend(img, y, x, color, coverage((1.0 - r) * m));
        }
    }
}

/// Copies `src` into `dst` with its top-left corner at `(y0, x0)`, clipping
/// at the borders.
pub fn paste(dst: &mut Tensor, src: &Tensor, y0: isize, x0: isize) {
    let (dh, dw) = (dst.shape()[1] as isize, dst.shape()[2] as isize);
    let (sh, sw) = (src.shape()[1] as isize, src.shape()[2] as isize);
    let s = src.data().to_vec();
    let d = dst.data_mut();
    for c in 0..3 {
        for y in 0..sh {
            for x in 0..sw {
                let (ty, tx) = (y0 + y, x0 + x);
                if ty >= 0 && ty < dh && tx >= 0 && tx < dw {
                    d[(c * dh * dw + ty * dw + tx) as usize] = s[(c * sh * sw + y * sw + x) as usize];
                }
            }
        }
    }
}

/// Rounds every value to single precision so that corpus files reproduce the
/// in-memory tensors exactly.
pub fn quantize(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance((0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (-1.0, 0.0), (1.0, 0.0)), 2.0);
    }

    #[test]
    fn zero_length_blur_is_identity() {
        let img = textured_background(6, 5, (0.2, 0.6), &mut Rng::new(1));
        assert_eq!(motion_blur(&img, 0.0, 0.3), img);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor::full(&[3, 8, 8], 0.4);
        let out = motion_blur(&img, 3.5, 0.7);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn occlusion_area() {
        let mut img = Tensor::zeros(&[3, 40, 40]);
        let mut rng = Rng::new(3);
        occlude(&mut img, 0.25, &mut rng);
        let changed = (0..1600).filter(|&i| (0..3).any(|c| img.data()[c * 1600 + i] != 0.0)).count();
        assert!((changed as f64 / 1600.0 - 0.25).abs() < 0.05, "{changed}");
    }
}
