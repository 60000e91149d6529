//! Synthetic talking-face scene: hand anchors around a face, a lip ellipse
//! whose shape encodes the viseme, and the composite video frame.

use super::draw::{fill_ellipse, paste, textured_background};
use super::glyph::{render_hand_glyph, Pose, SKIN};
use crate::alphabet::Language;
use crate::augmentation::resize_region;
use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Reference frame size the anchor table is laid out for, `(H, W)`.
pub const REFERENCE_FRAME: (usize, usize) = (96, 128);

/// Hand anchors `(x, y)` in reference-frame pixels. English uses the first
/// four. Every pair is at least 20 px apart.
pub const ANCHORS: [(f64, f64); 5] = [(106.0, 40.0), (86.0, 18.0), (84.0, 56.0), (62.0, 78.0), (34.0, 60.0)];

pub const MAX_ANCHOR_JITTER: f64 = 2.0;

/// `(width, opening)` of the mouth as fractions of the lip ROI.
pub const VISEMES: [(f64, f64); 11] = [
    (0.55, 0.05),
    (0.55, 0.25),
    (0.55, 0.45),
    (0.70, 0.10),
    (0.70, 0.30),
    (0.70, 0.50),
    (0.85, 0.05),
    (0.85, 0.25),
    (0.85, 0.45),
    (0.40, 0.15),
    (0.40, 0.35),
];

const FACE_CENTER: (f64, f64) = (56.0, 44.0);
const FACE_RADII: (f64, f64) = (30.0, 22.0);
const MOUTH: (f64, f64) = (62.0, 44.0);

pub fn anchor(language: Language, position: usize) -> Result<(f64, f64)> {
    ensure!(
        position < language.num_positions(),
        "position {position} out of range for {language} ({} positions)",
        language.num_positions()
    );
    Ok(ANCHORS[position])
}

/// Hand centroid normalized by the reference frame size.
pub fn normalized_coords(point: (f64, f64)) -> [f64; 2] {
    let (h, w) = REFERENCE_FRAME;
    [(point.0 / w as f64).clamp(0.0, 1.0), (point.1 / h as f64).clamp(0.0, 1.0)]
}

/// Lip ROI for `viseme`: skin with an outer lip ellipse and a dark opening.
pub fn render_lip(viseme: usize, language: Language, size: usize, rng: &mut Rng) -> Result<Tensor> {
    ensure!(
        viseme < language.num_visemes(),
        "viseme {viseme} out of range for {language} ({} visemes)",
        language.num_visemes()
    );
    ensure!(size >= 8, "lip ROI size {size} is too small");
    let (width, opening) = VISEMES[viseme];
    let mut img = textured_background(size, size, (0.55, 0.75), rng);
    let s = size as f64;
    let center = (s / 2.0 + rng.uniform(-1.0, 1.0), s / 2.0 + rng.uniform(-1.0, 1.0));
    let k = rng.uniform(0.95, 1.05);
    let rx = k * width * s / 2.0;
    let lip_color = [rng.uniform(0.65, 0.8), 0.25, 0.3];
    fill_ellipse(&mut img, center, (k * (opening + 0.18) * s / 2.0, rx), lip_color);
    fill_ellipse(&mut img, center, (k * opening * s / 2.0, 0.8 * rx), [0.08, 0.03, 0.04]);
    Ok(img)
}

/// Full frame with the face, the lip ROI pasted at the mouth and a reduced
/// copy of the hand ROI centered on `hand_center` (reference pixels).
pub fn compose_frame(
    hand_roi: &Tensor,
    lip_roi: &Tensor,
    hand_center: (f64, f64),
    frame_size: (usize, usize),
    rng: &mut Rng,
) -> Result<Tensor> {
    let (fh, fw) = frame_size;
    let (sy, sx) = (fh as f64 / REFERENCE_FRAME.0 as f64, fw as f64 / REFERENCE_FRAME.1 as f64);
    let mut frame = textured_background(fh, fw, (0.3, 0.5), rng);
    fill_ellipse(
        &mut frame,
        (FACE_CENTER.0 * sy, FACE_CENTER.1 * sx),
        (FACE_RADII.0 * sy, FACE_RADII.1 * sx),
        SKIN,
    );
    let lip_px = ((16.0 * sy.min(sx)).round() as usize).max(2);
    let lip = shrink(lip_roi, lip_px);
    paste(
        &mut frame,
        &lip,
        (MOUTH.0 * sy) as isize - lip_px as isize / 2,
        (MOUTH.1 * sx) as isize - lip_px as isize / 2,
    );
    let hand_px = ((24.0 * sy.min(sx)).round() as usize).max(2);
    let hand = shrink(hand_roi, hand_px);
    paste(
        &mut frame,
        &hand,
        (hand_center.1 * sy) as isize - hand_px as isize / 2,
        (hand_center.0 * sx) as isize - hand_px as isize / 2,
    );
    Ok(frame)
}

fn shrink(img: &Tensor, size: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    resize_region(img, 0.0, 0.0, h as f64, w as f64, size, size)
}

/// One rendered frame and its streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub frame: Tensor,
    pub hand_roi: Tensor,
    pub lip_roi: Tensor,
    /// Normalized `(x, y)` hand centroid.
    pub coords: [f64; 2],
}

/// Renders a single frame for the given codes.
pub fn render_frame(
    shape: usize,
    position: usize,
    viseme: usize,
    language: Language,
    pose: &Pose,
    sizes: FrameSizes,
    rng: &mut Rng,
) -> Result<FrameRender> {
    let (ax, ay) = anchor(language, position)?;
    let center = (
        ax + rng.uniform(-MAX_ANCHOR_JITTER, MAX_ANCHOR_JITTER),
        ay + rng.uniform(-MAX_ANCHOR_JITTER, MAX_ANCHOR_JITTER),
    );
    let hand_roi = render_hand_glyph(shape, pose, (sizes.hand_roi, sizes.hand_roi), &mut rng.derive(1))?;
    let lip_roi = render_lip(viseme, language, sizes.lip_roi, &mut rng.derive(2))?;
    let frame = compose_frame(&hand_roi, &lip_roi, center, sizes.frame, &mut rng.derive(3))?;
    Ok(FrameRender { frame, hand_roi, lip_roi, coords: normalized_coords(center) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSizes {
    pub frame: (usize, usize),
    pub hand_roi: usize,
    pub lip_roi: usize,
}
