//! Sentence synthesis and annotation noise.

use serde::{Deserialize, Serialize};

use super::draw::quantize;
use super::glyph::{render_hand_glyph, Pose};
use super::scene::{anchor, compose_frame, normalized_coords, render_lip, MAX_ANCHOR_JITTER};
use super::CorpusConfig;
use crate::alphabet::{Language, PhonemeAlphabet, NUM_SHAPES};
use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

pub const MAX_SENTENCE_LEN: usize = 30;

/// Label noise of the kind produced by audio-based segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Each interior boundary moves by up to this many frames.
    pub boundary_jitter_frames: usize,
    /// Probability that a segment's shape label is replaced by another class.
    pub label_flip_prob: f64,
    /// Frames by which the lip stream lags the hand stream.
    pub asynchrony_offset: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { boundary_jitter_frames: 3, label_flip_prob: 0.15, asynchrony_offset: 2 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { boundary_jitter_frames: 0, label_flip_prob: 0.0, asynchrony_offset: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.label_flip_prob),
            "label_flip_prob must be in [0, 1], got {}",
            self.label_flip_prob
        );
        Ok(())
    }
}

/// Frames `[start, end)` carrying one phoneme and its code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub phoneme: usize,
    pub shape: usize,
    pub position: usize,
    pub viseme: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSample {
    pub id: String,
    pub language: Language,
    /// Alphabet indices (1-based).
    pub phonemes: Vec<usize>,
    /// `[3, h, h]` per frame.
    pub hand_rois: Vec<Tensor>,
    /// `[3, l, l]` per frame, lagging the hand stream by `asynchrony` frames.
    pub lip_rois: Vec<Tensor>,
    /// Normalized `(x, y)` hand centroid per frame.
    pub coords: Vec<[f64; 2]>,
    pub frames: Option<Vec<Tensor>>,
    pub asynchrony: usize,
    pub clean: Vec<Segment>,
    pub noisy: Vec<Segment>,
}

impl SentenceSample {
    pub fn num_frames(&self) -> usize {
        self.hand_rois.len()
    }

    /// Per-segment hand-shape labels.
    pub fn shape_sequence(&self, noisy: bool) -> Vec<usize> {
        let segs = if noisy { &self.noisy } else { &self.clean };
        segs.iter().map(|s| s.shape).collect()
    }

    /// Segment covering frame `t`.
    pub fn segment_at(&self, t: usize, noisy: bool) -> Option<&Segment> {
        let segs = if noisy { &self.noisy } else { &self.clean };
        segs.iter().find(|s| s.start <= t && t < s.end)
    }

    /// Hand coordinates as a `[T, 2]` tensor.
    pub fn coords_tensor(&self) -> Tensor {
        let data = self.coords.iter().flatten().copied().collect();
        Tensor::from_vec(data, &[self.coords.len(), 2]).expect("non-empty sentence")
    }
}

fn draw_pose(cfg: &CorpusConfig, rng: &mut Rng) -> Pose {
    let p = &cfg.pose;
    let shift = p.max_translation * cfg.hand_roi as f64;
    Pose {
        rotation: rng.uniform(-p.max_rotation, p.max_rotation),
        dx: rng.uniform(-shift, shift),
        dy: rng.uniform(-shift, shift),
        scale: rng.uniform(p.scale.0, p.scale.1),
        occlusion_fraction: if rng.bernoulli(p.occlusion_prob) { rng.uniform(0.0, p.max_occlusion) } else { 0.0 },
        motion_blur_len: rng.uniform(0.0, p.max_blur),
    }
}

const STREAM_LAYOUT: u64 = 0;
const STREAM_HAND: u64 = 1;
const STREAM_LIP: u64 = 2;
const STREAM_FRAME: u64 = 3;

/// Renders one sentence. Segment lengths are uniform in `timing`; the first
/// `transition_fraction` of every segment after the first morphs the pose and
/// hand location from the previous segment, with extra motion blur. The lip
/// stream is delayed by the configured asynchrony, repeating its first frame.
pub fn synth_sentence(
    id: impl Into<String>,
    phonemes: &[usize],
    alphabet: &PhonemeAlphabet,
    timing: (usize, usize),
    rng: &Rng,
    cfg: &CorpusConfig,
) -> Result<SentenceSample> {
    ensure!(!phonemes.is_empty(), "sentence has no phonemes");
    ensure!(
        phonemes.len() <= MAX_SENTENCE_LEN,
        "sentence of {} phonemes exceeds {MAX_SENTENCE_LEN}",
        phonemes.len()
    );
    ensure!(timing.0 >= 2 && timing.0 <= timing.1, "invalid segment timing {timing:?}");
    let lang = alphabet.language;
    let mut layout = rng.derive(STREAM_LAYOUT);
    let mut clean = Vec::with_capacity(phonemes.len());
    let mut poses = Vec::with_capacity(phonemes.len());
    let mut centers = Vec::with_capacity(phonemes.len());
    let mut t = 0;
    for &ph in phonemes {
        let code = alphabet.coding_of(ph)?;
        let len = layout.int_inclusive(timing.0 as i64, timing.1 as i64) as usize;
        clean.push(Segment {
            start: t,
            end: t + len,
            phoneme: ph,
            shape: code.shape,
            position: code.position,
            viseme: code.viseme,
        });
        t += len;
        poses.push(draw_pose(cfg, &mut layout));
        let (ax, ay) = anchor(lang, code.position)?;
        centers.push((
            ax + layout.uniform(-MAX_ANCHOR_JITTER, MAX_ANCHOR_JITTER),
            ay + layout.uniform(-MAX_ANCHOR_JITTER, MAX_ANCHOR_JITTER),
        ));
    }
    let frames = t;
    let roi = (cfg.hand_roi, cfg.hand_roi);

    let mut hand_rois = Vec::with_capacity(frames);
    let mut coords = Vec::with_capacity(frames);
    let mut hand_centers = Vec::with_capacity(frames);
    let mut raw_lips = Vec::with_capacity(frames);
    for (k, seg) in clean.iter().enumerate() {
        let n_trans = if k == 0 { 0 } else { (cfg.transition_fraction * seg.len() as f64).ceil() as usize };
        for j in 0..seg.len() {
            let frame = seg.start + j;
            let (pose, center) = if j < n_trans {
                let a = (j + 1) as f64 / (n_trans + 1) as f64;
                let mut p = poses[k - 1].lerp(&poses[k], a);
                p.occlusion_fraction = poses[k].occlusion_fraction;
                p.motion_blur_len = poses[k].motion_blur_len + cfg.pose.transition_blur * (1.0 - a);
                let (c0, c1) = (centers[k - 1], centers[k]);
                (p, (c0.0 + (c1.0 - c0.0) * a, c0.1 + (c1.1 - c0.1) * a))
            } else {
                (poses[k], centers[k])
            };
            let mut hand = render_hand_glyph(seg.shape, &pose, roi, &mut rng.derive_path(&[STREAM_HAND, frame as u64]))?;
            quantize(&mut hand);
            hand_rois.push(hand);
            let mut c = normalized_coords(center);
            c.iter_mut().for_each(|v| *v = *v as f32 as f64);
            coords.push(c);
            hand_centers.push(center);
            let mut lip = render_lip(seg.viseme, lang, cfg.lip_roi, &mut rng.derive_path(&[STREAM_LIP, frame as u64]))?;
            quantize(&mut lip);
            raw_lips.push(lip);
        }
    }
    let a = cfg.noise.asynchrony_offset;
    let lip_rois: Vec<Tensor> = (0..frames).map(|t| raw_lips[t.saturating_sub(a)].clone()).collect();
    let frames_out = if cfg.store_frames {
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut f = compose_frame(
                &hand_rois[t],
                &lip_rois[t],
                hand_centers[t],
                cfg.frame_size,
                &mut rng.derive_path(&[STREAM_FRAME, t as u64]),
            )?;
            quantize(&mut f);
            out.push(f);
        }
        Some(out)
    } else {
        None
    };
    Ok(SentenceSample {
        id: id.into(),
        language: lang,
        phonemes: phonemes.to_vec(),
        hand_rois,
        lip_rois,
        coords,
        frames: frames_out,
        asynchrony: a,
        noisy: clean.clone(),
        clean,
    })
}

/// Replaces `sample.noisy` with a corrupted copy of the clean labels: every
/// interior boundary moves by a uniform integer in `[-δ, δ]`, clamped so that
/// segments keep at least one frame, and each shape label is replaced by a
/// uniformly chosen different class with probability `ρ`.
pub fn inject_label_noise(sample: &mut SentenceSample, noise: &NoiseConfig, rng: &mut Rng) {
    let clean = &sample.clean;
    let k = clean.len();
    let total = sample.num_frames();
    let delta = noise.boundary_jitter_frames as i64;
    let mut starts = Vec::with_capacity(k);
    starts.push(0usize);
    for i in 1..k {
        let b = clean[i].start as i64;
        let shift = rng.int_inclusive(-delta, delta);
        let lower = (b - delta).max(starts[i - 1] as i64 + 1);
        let upper = (b + delta).min((total - (k - i)) as i64);
        starts.push((b + shift).clamp(lower, upper) as usize);
    }
    sample.noisy = clean
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let mut s = *seg;
            s.start = starts[i];
            s.end = if i + 1 < k { starts[i + 1] } else { total };
            if rng.bernoulli(noise.label_flip_prob) {
                let other = rng.index(NUM_SHAPES - 1);
                s.shape = if other >= seg.shape { other + 1 } else { other };
            }
            s
        })
        .collect();
}
