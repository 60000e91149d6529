//! Procedural cued-speech corpus: glyph hand shapes, lip ellipses and hand
//! positions rendered into sentences with noisy annotations, plus a static
//! hand-shape image set, splits and on-disk storage.

mod draw;
mod glyph;
mod io;
mod scene;
mod sentence;

pub use draw::{motion_blur, quantize};
pub use glyph::{render_hand_glyph, Pose, Stroke, GLYPHS};
pub use io::{read_corpus, read_tensor, write_corpus, write_tensor, MANIFEST, TENSOR_MAGIC};
pub use scene::{
    anchor, compose_frame, normalized_coords, render_frame, render_lip, FrameRender, FrameSizes, ANCHORS,
    MAX_ANCHOR_JITTER, REFERENCE_FRAME, VISEMES,
};
pub use sentence::{inject_label_noise, synth_sentence, NoiseConfig, Segment, SentenceSample, MAX_SENTENCE_LEN};

use serde::{Deserialize, Serialize};

use crate::alphabet::{Language, PhonemeAlphabet};
use crate::autodiff::Tensor;
use crate::error::{ensure, Result};
use crate::rng::{mix_seed, Rng};

/// Ranges from which per-segment hand poses are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRanges {
    pub max_rotation: f64,
    pub scale: (f64, f64),
    /// Maximum translation as a fraction of the hand ROI side.
    pub max_translation: f64,
    pub occlusion_prob: f64,
    pub max_occlusion: f64,
    pub max_blur: f64,
    /// Extra blur at the start of a transition, fading out linearly.
    pub transition_blur: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            max_rotation: 0.35,
            scale: (0.8, 1.15),
            max_translation: 0.06,
            occlusion_prob: 0.25,
            max_occlusion: 0.2,
            max_blur: 1.5,
            transition_blur: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub language: Language,
    pub num_sentences: usize,
    /// Inclusive range of phonemes per sentence.
    pub phonemes_per_sentence: (usize, usize),
    /// Inclusive range of frames per phoneme segment.
    pub segment_frames: (usize, usize),
    pub transition_fraction: f64,
    /// `(H, W)` of composite frames.
    pub frame_size: (usize, usize),
    pub hand_roi: usize,
    pub lip_roi: usize,
    pub store_frames: bool,
    pub num_static: usize,
    pub static_frames_per_sentence: usize,
    pub pose: PoseRanges,
    pub noise: NoiseConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            language: Language::French,
            num_sentences: 200,
            phonemes_per_sentence: (3, 8),
            segment_frames: (6, 10),
            transition_fraction: 0.3,
            frame_size: (96, 128),
            hand_roi: 64,
            lip_roi: 48,
            store_frames: false,
            num_static: 2000,
            static_frames_per_sentence: 8,
            pose: PoseRanges::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.phonemes_per_sentence;
        ensure!(lo >= 1 && lo <= hi && hi <= MAX_SENTENCE_LEN, "phonemes_per_sentence {lo}..{hi} invalid");
        let (lo, hi) = self.segment_frames;
        ensure!(lo >= 2 && lo <= hi, "segment_frames {lo}..{hi} invalid (minimum 2)");
        ensure!(
            (0.0..1.0).contains(&self.transition_fraction),
            "transition_fraction must be in [0, 1)"
        );
        ensure!(self.hand_roi >= 8 && self.lip_roi >= 8, "ROI sizes must be at least 8");
        ensure!(self.frame_size.0 >= 8 && self.frame_size.1 >= 8, "frame size too small");
        ensure!(self.static_frames_per_sentence >= 1, "static_frames_per_sentence must be positive");
        let p = &self.pose;
        ensure!(
            (0.0..=std::f64::consts::PI).contains(&p.max_rotation),
            "max_rotation must be in [0, pi]"
        );
        ensure!(0.5 <= p.scale.0 && p.scale.0 <= p.scale.1 && p.scale.1 <= 1.5, "pose scale range invalid");
        ensure!((0.0..=1.0).contains(&p.occlusion_prob), "occlusion_prob must be in [0, 1]");
        ensure!((0.0..=0.5).contains(&p.max_occlusion), "max_occlusion must be in [0, 0.5]");
        ensure!(p.max_blur >= 0.0 && p.transition_blur >= 0.0, "blur lengths must be non-negative");
        ensure!(p.max_translation >= 0.0, "max_translation must be non-negative");
        self.noise.validate()
    }
}

/// Hand ROIs sampled from noisily annotated sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaticSet {
    pub images: Vec<Tensor>,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Vec<usize>,
    /// `(static sentence index, frame)` each image was taken from.
    pub sources: Vec<(usize, usize)>,
}

impl StaticSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> StaticSet {
        StaticSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub alphabet: PhonemeAlphabet,
    pub sentences: Vec<SentenceSample>,
    pub static_set: StaticSet,
}

const STREAM_SENTENCE: u64 = 0x51;
const STREAM_STATIC: u64 = 0x52;

/// Worker count for data generation: `CUEDSEQ_THREADS` if set, otherwise the
/// available parallelism.
pub fn generation_threads() -> usize {
    std::env::var("CUEDSEQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// `f(0..n)` evaluated on up to `threads` workers; results in index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let chunk = n.div_ceil(threads);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (k, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn random_phonemes(alphabet: &PhonemeAlphabet, range: (usize, usize), rng: &mut Rng) -> Vec<usize> {
    let len = rng.int_inclusive(range.0 as i64, range.1 as i64) as usize;
    (0..len).map(|_| 1 + rng.index(alphabet.len())).collect()
}

/// Sentence `index` of the corpus generated from `seed`, with noisy labels.
pub fn generate_sentence(cfg: &CorpusConfig, alphabet: &PhonemeAlphabet, seed: u64, stream: u64, index: usize) -> Result<SentenceSample> {
    let rng = Rng::new(mix_seed(seed, &[stream, index as u64]));
    let phonemes = random_phonemes(alphabet, cfg.phonemes_per_sentence, &mut rng.derive(0));
    let id = if stream == STREAM_STATIC { format!("static{index:05}") } else { format!("sent{index:05}") };
    let mut s = synth_sentence(id, &phonemes, alphabet, cfg.segment_frames, &rng.derive(1), cfg)?;
    inject_label_noise(&mut s, &cfg.noise, &mut rng.derive(2));
    Ok(s)
}

/// Static image set: `static_frames_per_sentence` distinct random frames from
/// each of a separate series of sentences, labeled with the noisy and clean
/// shape at that frame.
pub fn generate_static_set(cfg: &CorpusConfig, alphabet: &PhonemeAlphabet, seed: u64, threads: usize) -> Result<StaticSet> {
    let per = cfg.static_frames_per_sentence;
    let n_sent = cfg.num_static.div_ceil(per);
    let plain = CorpusConfig { store_frames: false, ..cfg.clone() };
    let parts = parallel_map(n_sent, threads, |j| {
        let s = generate_sentence(&plain, alphabet, seed, STREAM_STATIC, j)?;
        let mut pick = Rng::new(mix_seed(seed, &[STREAM_STATIC, j as u64, 3]));
        let mut frames = pick.permutation(s.num_frames());
        frames.truncate(per.min(s.num_frames()));
        frames.sort_unstable();
        Ok(frames
            .into_iter()
            .map(|t| {
                let clean = s.segment_at(t, false).expect("segments tile").shape;
                let noisy = s.segment_at(t, true).expect("segments tile").shape;
                (s.hand_rois[t].clone(), clean, noisy, (j, t))
            })
            .collect::<Vec<_>>())
    })?;
    let mut set = StaticSet::default();
    for (img, clean, noisy, src) in parts.into_iter().flatten().take(cfg.num_static) {
        set.images.push(img);
        set.clean_labels.push(clean);
        set.noisy_labels.push(noisy);
        set.sources.push(src);
    }
    Ok(set)
}

/// Generates the full corpus; the result depends only on `(cfg, seed)`.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let alphabet = PhonemeAlphabet::builtin(cfg.language);
    let threads = generation_threads();
    let sentences = parallel_map(cfg.num_sentences, threads, |i| {
        generate_sentence(cfg, &alphabet, seed, STREAM_SENTENCE, i)
    })?;
    let static_set = generate_static_set(cfg, &alphabet, seed, threads)?;
    Ok(Corpus { seed, config: cfg.clone(), alphabet, sentences, static_set })
}

/// Shuffled 80/20 partition of `0..n`; the training part has `round(0.8 n)`
/// elements.
pub fn split_80_20(n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut perm = rng.permutation(n);
    let n_train = (0.8 * n as f64).round() as usize;
    let test = perm.split_off(n_train);
    (perm, test)
}

/// `k` disjoint folds covering `0..n`; the first `n mod k` folds hold one
/// extra element.
pub fn kfold(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    ensure!(k >= 1, "k must be positive");
    ensure!(n >= k, "cannot split {n} items into {k} folds");
    let perm = rng.permutation(n);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(perm[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}
