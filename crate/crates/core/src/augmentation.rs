//! Stochastic two-view augmentation: crop-and-resize, horizontal flip,
//! color and gray-level distortion, Gaussian blur.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Fraction of the source area kept by the crop.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub color_strength: f64,
    pub gray_prob: f64,
    pub blur_sigma_range: (f64, f64),
    /// `(H, W)` of every produced view.
    pub output_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.5, 1.0),
            flip_prob: 0.5,
            color_strength: 0.4,
            gray_prob: 0.2,
            blur_sigma_range: (0.1, 1.0),
            output_size: (64, 64),
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled; views equal the (resized) input.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            color_strength: 0.0,
            gray_prob: 0.0,
            blur_sigma_range: (0.0, 0.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        ensure!(
            lo > 0.0 && lo <= hi && hi <= 1.0,
            "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
        );
        ensure!((0.0..=1.0).contains(&self.flip_prob), "flip_prob must be in [0,1]");
        ensure!((0.0..=1.0).contains(&self.gray_prob), "gray_prob must be in [0,1]");
        ensure!(self.color_strength >= 0.0, "color_strength must be non-negative");
        let (slo, shi) = self.blur_sigma_range;
        ensure!(
            slo >= 0.0 && slo <= shi,
            "blur_sigma_range must satisfy 0 <= min <= max, got ({slo}, {shi})"
        );
        ensure!(
            self.output_size.0 > 0 && self.output_size.1 > 0,
            "output_size must be positive"
        );
        Ok(())
    }
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(crate::error::invalid!("expected a [3,H,W] image, got {s:?}")),
    }
}

/// Whole-image bilinear resize to `(out_h, out_w)`; a no-op clone when the
/// size already matches.
pub fn resize_to(img: &Tensor, size: (usize, usize)) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if (h, w) == size {
        return img.clone();
    }
    resize_region(img, 0.0, 0.0, h as f64, w as f64, size.0, size.1)
}

/// Bilinear resampling of the window `[y0, y0+ch) × [x0, x0+cw)` onto an
/// `out_h × out_w` grid using pixel-center alignment. A window of the output
/// size at integer offsets is reproduced exactly.
pub fn resize_region(
    img: &Tensor,
    y0: f64,
    x0: f64,
    ch: f64,
    cw: f64,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let sy = ch / out_h as f64;
    let sx = cw / out_w as f64;
    let mut out = vec![0.0; c * out_h * out_w];
    let sample_axis = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for oy in 0..out_h {
        let (y_a, y_b, fy) = sample_axis(y0 + (oy as f64 + 0.5) * sy - 0.5, h);
        for ox in 0..out_w {
            let (x_a, x_b, fx) = sample_axis(x0 + (ox as f64 + 0.5) * sx - 0.5, w);
            for ch_i in 0..c {
                let base = ch_i * h * w;
                let v00 = src[base + y_a * w + x_a];
                let v01 = src[base + y_a * w + x_b];
                let v10 = src[base + y_b * w + x_a];
                let v11 = src[base + y_b * w + x_b];
                let top = if fx == 0.0 { v00 } else { v00 + (v01 - v00) * fx };
                let bot = if fx == 0.0 { v10 } else { v10 + (v11 - v10) * fx };
                let v = if fy == 0.0 { top } else { top + (bot - top) * fy };
                out[(ch_i * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    Tensor::from_vec(out, &[c, out_h, out_w]).expect("valid shape")
}

/// Crop a random window (area fraction drawn from `crop_scale_range`, aspect
/// ratio log-uniform in `[3/4, 4/3]`) and resize it to `output_size`.
/// After ten rejected draws the largest centered window with an admissible
/// aspect ratio is used.
pub fn random_crop_resize(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    ensure!(h >= 8 && w >= 8, "random_crop_resize needs at least 8x8 pixels, got {h}x{w}");
    let area = (h * w) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.uniform(cfg.crop_scale_range.0, cfg.crop_scale_range.1);
        let ratio = rng.uniform(log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.int_inclusive(0, (h - ch) as i64) as usize;
            let x0 = rng.int_inclusive(0, (w - cw) as i64) as usize;
            window = Some((y0, x0, ch, cw));
            break;
        }
    }
    let (y0, x0, ch, cw) = window.unwrap_or_else(|| {
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < 3.0 / 4.0 {
            ((w as f64 / (3.0 / 4.0)).round() as usize, w)
        } else if in_ratio > 4.0 / 3.0 {
            (h, (h as f64 * 4.0 / 3.0).round() as usize)
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let (oh, ow) = cfg.output_size;
    Ok(resize_region(img, y0 as f64, x0 as f64, ch as f64, cw as f64, oh, ow))
}

pub fn horizontal_flip(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::from_vec(out, img.shape()).expect("valid shape")
}

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue jitter followed by optional
/// grayscale conversion. Factors are drawn in `[1−s, 1+s]` and the hue shift
/// in `[−0.1s, 0.1s]` turns, with `s = color_strength`.
pub fn color_and_gray_distort(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let s = cfg.color_strength;
    let brightness = rng.uniform(1.0 - s, 1.0 + s);
    let contrast = rng.uniform(1.0 - s, 1.0 + s);
    let saturation = rng.uniform(1.0 - s, 1.0 + s);
    let hue = rng.uniform(-0.1 * s, 0.1 * s);
    let gray = rng.bernoulli(cfg.gray_prob);

    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n = h * w;
    let mut px = img.data().to_vec();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    if brightness != 1.0 {
        px.iter_mut().for_each(|v| *v = clamp(*v * brightness));
    }
    if contrast != 1.0 {
        let mean = (0..n)
            .map(|i| luminance(px[i], px[n + i], px[2 * n + i]))
            .sum::<f64>()
            / n as f64;
        px.iter_mut().for_each(|v| *v = clamp((*v - mean) * contrast + mean));
    }
    if saturation != 1.0 {
        for i in 0..n {
            let l = luminance(px[i], px[n + i], px[2 * n + i]);
            for c in 0..3 {
                px[c * n + i] = clamp(l + (px[c * n + i] - l) * saturation);
            }
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (hh, ss, vv) = rgb_to_hsv(px[i], px[n + i], px[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(hh + hue, ss, vv);
            px[i] = clamp(r);
            px[n + i] = clamp(g);
            px[2 * n + i] = clamp(b);
        }
    }
    if gray {
        for i in 0..n {
            let l = clamp(luminance(px[i], px[n + i], px[2 * n + i]));
            px[i] = l;
            px[n + i] = l;
            px[2 * n + i] = l;
        }
    }
    Tensor::from_vec(px, img.shape()).expect("valid shape")
}

/// Whole-sample symmetric reflection (`d c b a | a b c d | d c b a`), which
/// conserves total mass under a normalized symmetric kernel.
fn reflect_index(p: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = p.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with radius `ceil(3σ)` and reflect padding.
/// `σ = 0` returns the input unchanged.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), "blur sigma must be a finite non-negative number, got {sigma}");
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for plane in 0..c {
        for y in 0..h {
            let row = (plane * h + y) * w;
            for x in 0..w {
                tmp[row + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[row + reflect_index(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for plane in 0..c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[base + reflect_index(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::from_vec(out, img.shape())
}

/// One draw of the full pipeline: crop → flip → color/gray → blur.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let mut x = random_crop_resize(img, cfg, rng)?;
    if rng.bernoulli(cfg.flip_prob) {
        x = horizontal_flip(&x);
    }
    x = color_and_gray_distort(&x, cfg, rng);
    let sigma = rng.uniform(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    gaussian_blur(&x, sigma)
}

/// Two independent pipeline draws of the same source image, from disjoint
/// child streams of `rng`.
pub fn make_view_pair(img: &Tensor, cfg: &AugmentConfig, rng: &Rng) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let a = augment(img, cfg, &mut rng.derive(1))?;
    let b = augment(img, cfg, &mut rng.derive(2))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_vec((0..3 * h * w).map(|_| rng.uniform(0.0, 1.0)).collect(), &[3, h, w]).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn full_area_crop_is_identity() {
        let img = random_image(16, 16, 1);
        let cfg = AugmentConfig::identity((16, 16));
        for seed in 0..10 {
            let out = random_crop_resize(&img, &cfg, &mut Rng::new(seed)).unwrap();
            assert!(max_abs_diff(&out, &img) <= 1e-9);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[3, 20, 12], 0.37);
        let cfg = AugmentConfig {
            output_size: (9, 13),
            ..AugmentConfig::default()
        };
        let out = random_crop_resize(&img, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(out.shape(), &[3, 9, 13]);
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let blurred = gaussian_blur(&img, 1.3).unwrap();
        assert!(blurred.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn crop_is_deterministic() {
        let img = random_image(24, 24, 2);
        let cfg = AugmentConfig::default();
        let a = random_crop_resize(&img, &cfg, &mut Rng::new(42)).unwrap();
        let b = random_crop_resize(&img, &cfg, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_rejects_tiny_images() {
        let img = Tensor::zeros(&[3, 7, 20]);
        assert!(random_crop_resize(&img, &AugmentConfig::default(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn color_identity_and_gray() {
        let img = random_image(8, 8, 4);
        let cfg = AugmentConfig::identity((8, 8));
        assert_eq!(color_and_gray_distort(&img, &cfg, &mut Rng::new(0)), img);

        let gray = AugmentConfig {
            gray_prob: 1.0,
            ..AugmentConfig::default()
        };
        let out = color_and_gray_distort(&img, &gray, &mut Rng::new(5));
        let n = 64;
        for i in 0..n {
            assert_eq!(out.data()[i], out.data()[n + i]);
            assert_eq!(out.data()[i], out.data()[2 * n + i]);
        }
    }

    #[test]
    fn color_keeps_unit_range() {
        let cfg = AugmentConfig {
            color_strength: 1.5,
            ..AugmentConfig::default()
        };
        for seed in 0..1000 {
            let img = random_image(4, 4, 1000 + seed);
            let out = color_and_gray_distort(&img, &cfg, &mut Rng::new(seed));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_identity_and_mean() {
        let img = random_image(10, 13, 6);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        for sigma in [0.3, 1.0, 2.5, 6.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            let m0: f64 = img.data().iter().sum::<f64>() / img.numel() as f64;
            let m1: f64 = out.data().iter().sum::<f64>() / out.numel() as f64;
            assert!((m0 - m1).abs() < 1e-9, "sigma {sigma}: {m0} vs {m1}");
        }
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn identity_pipeline_pair() {
        let img = random_image(12, 12, 7);
        let cfg = AugmentConfig::identity((12, 12));
        let (a, b) = make_view_pair(&img, &cfg, &Rng::new(1)).unwrap();
        assert!(max_abs_diff(&a, &img) <= 1e-9);
        assert_eq!(a, b);
    }

    #[test]
    fn view_pairs_are_deterministic_and_distinct() {
        let img = random_image(16, 16, 8);
        let cfg = AugmentConfig {
            output_size: (16, 16),
            ..AugmentConfig::default()
        };
        let p1 = make_view_pair(&img, &cfg, &Rng::new(11)).unwrap();
        let p2 = make_view_pair(&img, &cfg, &Rng::new(11)).unwrap();
        assert_eq!(p1, p2);
        let differ = (0..100)
            .filter(|&s| {
                let (a, b) = make_view_pair(&img, &cfg, &Rng::new(s)).unwrap();
                a != b
            })
            .count();
        assert!(differ >= 95, "{differ}");
        for s in 0..20 {
            let (a, b) = make_view_pair(&img, &cfg, &Rng::new(s)).unwrap();
            assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.shape(), &[3, 16, 16]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_scale_range: (0.9, 0.5),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            gray_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
