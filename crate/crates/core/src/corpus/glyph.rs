//! Procedural hand-shape glyphs: eight stroke patterns standing in for the
//! eight cued hand shapes.

use serde::{Deserialize, Serialize};

use super::draw::{blend, coverage, motion_blur, occlude, segment_distance, textured_background};
use crate::alphabet::NUM_SHAPES;
use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// A stroke from `(x0, y0)` to `(x1, y1)` in glyph units (the glyph spans
/// `[-1, 1]²`, y pointing down) with the given width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stroke {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub width: f64,
}

const W: f64 = 0.32;

const fn s(x0: f64, y0: f64, x1: f64, y1: f64) -> Stroke {
    Stroke { from: (x0, y0), to: (x1, y1), width: W }
}

/// Canonical stroke table. No pattern is the horizontal mirror image of
/// another, so flip augmentation never maps one class onto a different one.
pub const GLYPHS: [&[Stroke]; NUM_SHAPES] = [
    // bar
    &[s(0.0, -0.75, 0.0, 0.75)],
    // two bars
    &[s(-0.35, -0.75, -0.35, 0.75), s(0.35, -0.75, 0.35, 0.75)],
    // V
    &[s(0.0, 0.7, -0.55, -0.75), s(0.0, 0.7, 0.55, -0.75)],
    // T
    &[s(-0.7, -0.65, 0.7, -0.65), s(0.0, -0.65, 0.0, 0.75)],
    // X
    &[s(-0.65, -0.65, 0.65, 0.65), s(-0.65, 0.65, 0.65, -0.65)],
    // L
    &[s(-0.45, -0.75, -0.45, 0.65), s(-0.45, 0.65, 0.65, 0.65)],
    // fan
    &[s(0.0, 0.75, -0.7, -0.6), s(0.0, 0.75, 0.0, -0.75), s(0.0, 0.75, 0.7, -0.6)],
    // E
    &[
        s(-0.5, -0.75, -0.5, 0.75),
        s(-0.5, -0.75, 0.6, -0.75),
        s(-0.5, 0.0, 0.45, 0.0),
        s(-0.5, 0.75, 0.6, 0.75),
    ],
];

/// Geometric and photometric state of the hand in its ROI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: f64,
    /// Translation in pixels.
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub occlusion_fraction: f64,
    /// Motion-blur length in pixels.
    pub motion_blur_len: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: 0.0,
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        occlusion_fraction: 0.0,
        motion_blur_len: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        ensure!((-pi..=pi).contains(&self.rotation), "rotation {} outside [-pi, pi]", self.rotation);
        ensure!((0.5..=1.5).contains(&self.scale), "scale {} outside [0.5, 1.5]", self.scale);
        ensure!(
            (0.0..=0.5).contains(&self.occlusion_fraction),
            "occlusion_fraction {} outside [0, 0.5]",
            self.occlusion_fraction
        );
        ensure!(
            self.motion_blur_len >= 0.0 && self.motion_blur_len.is_finite(),
            "motion_blur_len must be non-negative"
        );
        ensure!(self.dx.is_finite() && self.dy.is_finite(), "translation must be finite");
        Ok(())
    }

    /// Componentwise interpolation from `self` (`t = 0`) to `other` (`t = 1`).
    pub fn lerp(&self, other: &Pose, t: f64) -> Pose {
        let l = |a: f64, b: f64| a + (b - a) * t;
        Pose {
            rotation: l(self.rotation, other.rotation),
            dx: l(self.dx, other.dx),
            dy: l(self.dy, other.dy),
            scale: l(self.scale, other.scale),
            occlusion_fraction: l(self.occlusion_fraction, other.occlusion_fraction),
            motion_blur_len: l(self.motion_blur_len, other.motion_blur_len),
        }
    }
}

pub const SKIN: [f64; 3] = [0.93, 0.77, 0.63];

/// Renders glyph `class` under `pose` on a `size = (H, W)` canvas with a
/// textured background. The rng drives background, skin tone, occluder and
/// blur direction.
pub fn render_hand_glyph(class: usize, pose: &Pose, size: (usize, usize), rng: &mut Rng) -> Result<Tensor> {
    ensure!(class < NUM_SHAPES, "glyph class {class} out of range [0, {NUM_SHAPES})");
    pose.validate()?;
    let (h, w) = size;
    ensure!(h >= 8 && w >= 8, "glyph canvas {h}x{w} is too small");
    let mut img = textured_background(h, w, (0.15, 0.45), rng);
    let tone = rng.uniform(0.9, 1.05);
    let color = SKIN.map(|c| (c * tone).min(1.0));
    let half = 0.4 * h.min(w) as f64 * pose.scale;
    let (cy, cx) = (h as f64 / 2.0 + pose.dy, w as f64 / 2.0 + pose.dx);
    let (sin, cos) = pose.rotation.sin_cos();
    let strokes = GLYPHS[class];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            // Rotate the pixel back into glyph units.
            let u = (cos * px + sin * py) / half;
            let v = (-sin * px + cos * py) / half;
            let alpha = strokes
                .iter()
                .map(|st| coverage((st.width / 2.0 - segment_distance((u, v), st.from, st.to)) * half))
                .fold(0.0, f64::max);
            blend(&mut img, y, x, color, alpha);
        }
    }
    occlude(&mut img, pose.occlusion_fraction, rng);
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    Ok(motion_blur(&img, pose.motion_blur_len, angle))
}
