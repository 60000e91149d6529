//! Corpus contract checks: serialization identity, clean-label consistency
//! and noise bounds.

use std::path::Path;

use cuedseq::alphabet::{Language, PhonemeAlphabet};
use cuedseq::autodiff::Tensor;
use cuedseq::corpus::{
    anchor, inject_label_noise, normalized_coords, quantize, read_corpus, render_hand_glyph, render_lip, synth_sentence,
    write_corpus, Corpus, CorpusConfig, NoiseConfig, Pose, PoseRanges, SentenceSample, MAX_ANCHOR_JITTER,
    REFERENCE_FRAME,
};
use cuedseq::rng::Rng;

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn same_bits(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape() && bits(x) == bits(y))
}

/// Field-by-field bitwise comparison of two corpora.
pub fn corpus_bitwise_equal(a: &Corpus, b: &Corpus) -> Result<(), String> {
    if a.seed != b.seed || a.config != b.config || a.alphabet != b.alphabet {
        return Err("metadata differs".into());
    }
    if a.sentences.len() != b.sentences.len() {
        return Err("sentence count differs".into());
    }
    for (x, y) in a.sentences.iter().zip(&b.sentences) {
        let coords = |s: &SentenceSample| s.coords.iter().flat_map(|c| c.map(f64::to_bits)).collect::<Vec<_>>();
        let frames_equal = match (&x.frames, &y.frames) {
            (Some(f), Some(g)) => same_bits(f, g),
            (None, None) => true,
            _ => false,
        };
        if x.id != y.id
            || x.language != y.language
            || x.phonemes != y.phonemes
            || x.asynchrony != y.asynchrony
            || x.clean != y.clean
            || x.noisy != y.noisy
            || !same_bits(&x.hand_rois, &y.hand_rois)
            || !same_bits(&x.lip_rois, &y.lip_rois)
            || coords(x) != coords(y)
            || !frames_equal
        {
            return Err(format!("sentence {} differs", x.id));
        }
    }
    let (s, t) = (&a.static_set, &b.static_set);
    if !same_bits(&s.images, &t.images)
        || s.clean_labels != t.clean_labels
        || s.noisy_labels != t.noisy_labels
        || s.sources != t.sources
    {
        return Err("static set differs".into());
    }
    Ok(())
}

pub fn small_corpus_config(language: Language) -> CorpusConfig {
    CorpusConfig {
        language,
        num_sentences: 6,
        phonemes_per_sentence: (1, 4),
        segment_frames: (3, 5),
        hand_roi: 24,
        lip_roi: 16,
        frame_size: (48, 64),
        store_frames: true,
        num_static: 20,
        static_frames_per_sentence: 4,
        ..CorpusConfig::default()
    }
}

pub fn round_trip(corpus: &Corpus, dir: &Path) -> Result<(), String> {
    write_corpus(corpus, dir).map_err(|e| e.to_string())?;
    let back = read_corpus(dir).map_err(|e| e.to_string())?;
    corpus_bitwise_equal(corpus, &back)
}

fn still_pose_ranges() -> PoseRanges {
    PoseRanges {
        max_rotation: 0.0,
        scale: (1.0, 1.0),
        max_translation: 0.0,
        occlusion_prob: 0.0,
        max_occlusion: 0.0,
        max_blur: 0.0,
        transition_blur: 0.0,
    }
}

fn random_sentence(alphabet: &PhonemeAlphabet, rng: &mut Rng) -> Vec<usize> {
    let len = 1 + rng.index(6);
    (0..len).map(|_| 1 + rng.index(alphabet.len())).collect()
}

fn requantized(mut t: Tensor) -> Tensor {
    quantize(&mut t);
    t
}

/// Checks on 100 synthesized sentences per language that every frame shows
/// what its clean segment says:
/// - the lip ROI is the render of the segment's viseme (delayed by the
///   asynchrony offset),
/// - the hand coordinates lie within the jitter radius of the position's
///   anchor outside transitions,
/// - with a still pose the hand ROI is exactly the render of the segment's
///   shape class,
/// - segments tile the sentence and carry the alphabet's coding.
pub fn clean_label_consistency() -> Vec<String> {
    let mut failures = Vec::new();
    for language in [Language::French, Language::English] {
        let alphabet = PhonemeAlphabet::builtin(language);
        let mut cfg = CorpusConfig { language, hand_roi: 24, lip_roi: 16, ..CorpusConfig::default() };
        let mut draws = Rng::new(31);
        for n in 0..100 {
            let still = n % 2 == 1;
            cfg.pose = if still { still_pose_ranges() } else { PoseRanges::default() };
            let phonemes = random_sentence(&alphabet, &mut draws);
            let rng = Rng::new(1000 + n);
            let s = match synth_sentence(format!("s{n}"), &phonemes, &alphabet, cfg.segment_frames, &rng, &cfg) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("{language} sample {n}: {e}"));
                    continue;
                }
            };
            if let Err(e) = check_sentence(&s, &alphabet, &rng, &cfg, still) {
                failures.push(format!("{language} sample {n}: {e}"));
            }
        }
    }
    failures
}

fn check_sentence(s: &SentenceSample, alphabet: &PhonemeAlphabet, rng: &Rng, cfg: &CorpusConfig, still: bool) -> Result<(), String> {
    let frames = s.num_frames();
    let mut t = 0;
    for seg in &s.clean {
        if seg.start != t || seg.end <= seg.start {
            return Err(format!("segments do not tile at {t}"));
        }
        let code = alphabet.coding_of(seg.phoneme).map_err(|e| e.to_string())?;
        if (code.shape, code.position, code.viseme) != (seg.shape, seg.position, seg.viseme) {
            return Err(format!("segment {seg:?} disagrees with the coding table"));
        }
        t = seg.end;
    }
    if t != frames || s.lip_rois.len() != frames || s.coords.len() != frames {
        return Err("stream lengths disagree".into());
    }
    let a = s.asynchrony;
    let (h, w) = REFERENCE_FRAME;
    let tol = [MAX_ANCHOR_JITTER / w as f64 + 1e-6, MAX_ANCHOR_JITTER / h as f64 + 1e-6];
    for (k, seg) in s.clean.iter().enumerate() {
        let n_trans = if k == 0 { 0 } else { (cfg.transition_fraction * seg.len() as f64).ceil() as usize };
        let target = normalized_coords(anchor(s.language, seg.position).unwrap());
        for t in seg.start..seg.end {
            let c = s.coords[t];
            if t >= seg.start + n_trans && ((c[0] - target[0]).abs() > tol[0] || (c[1] - target[1]).abs() > tol[1]) {
                return Err(format!("frame {t}: coords {c:?} far from anchor {target:?}"));
            }
            if still {
                let hand = render_hand_glyph(seg.shape, &Pose::IDENTITY, (cfg.hand_roi, cfg.hand_roi), &mut rng.derive_path(&[1, t as u64]))
                    .map_err(|e| e.to_string())?;
                if bits(&requantized(hand)) != bits(&s.hand_rois[t]) {
                    return Err(format!("frame {t}: hand ROI is not class {}", seg.shape));
                }
            }
        }
    }
    for t in 0..frames {
        let src = t.saturating_sub(a);
        let vis = s.segment_at(src, false).unwrap().viseme;
        let lip = render_lip(vis, s.language, cfg.lip_roi, &mut rng.derive_path(&[2, src as u64])).map_err(|e| e.to_string())?;
        if bits(&requantized(lip)) != bits(&s.lip_rois[t]) {
            return Err(format!("frame {t}: lip ROI is not viseme {vis}"));
        }
    }
    Ok(())
}

/// Noise properties over 100 samples: boundaries within ±δ and ordered,
/// shapes flipped only to other classes, the flip rate within three standard
/// errors of ρ, δ = ρ = 0 the identity and ρ = 1 a flip of every label.
pub fn noise_bounds() -> Vec<String> {
    let mut failures = Vec::new();
    let alphabet = PhonemeAlphabet::builtin(Language::French);
    let cfg = CorpusConfig { hand_roi: 16, lip_roi: 8, ..CorpusConfig::default() };
    let mut draws = Rng::new(8);
    let mut samples = Vec::new();
    for n in 0..100 {
        let phonemes = random_sentence(&alphabet, &mut draws);
        samples.push(synth_sentence(format!("n{n}"), &phonemes, &alphabet, (2, 6), &Rng::new(n), &cfg).unwrap());
    }
    for (delta, rho) in [(2usize, 0.15), (3, 0.3), (0, 0.0), (1, 1.0)] {
        let noise = NoiseConfig { boundary_jitter_frames: delta, label_flip_prob: rho, asynchrony_offset: 0 };
        let (mut flips, mut segments) = (0usize, 0usize);
        for (n, s) in samples.iter().enumerate() {
            let mut s = s.clone();
            inject_label_noise(&mut s, &noise, &mut Rng::new(500 + n as u64));
            let tag = format!("δ={delta} ρ={rho} sample {n}");
            if s.noisy.len() != s.clean.len() {
                failures.push(format!("{tag}: segment count changed"));
                continue;
            }
            let mut prev_end = 0;
            for (c, z) in s.clean.iter().zip(&s.noisy) {
                if z.start != prev_end || z.end <= z.start {
                    failures.push(format!("{tag}: noisy segments out of order"));
                }
                prev_end = z.end;
                if c.start.abs_diff(z.start) > delta || c.end.abs_diff(z.end) > delta {
                    failures.push(format!("{tag}: boundary moved beyond ±{delta}"));
                }
                if (z.phoneme, z.position, z.viseme) != (c.phoneme, c.position, c.viseme) || z.shape >= 8 {
                    failures.push(format!("{tag}: non-shape labels changed"));
                }
                flips += usize::from(z.shape != c.shape);
                segments += 1;
            }
            if prev_end != s.num_frames() {
                failures.push(format!("{tag}: noisy segments do not cover the sentence"));
            }
            if delta == 0 && rho == 0.0 && s.noisy != s.clean {
                failures.push(format!("{tag}: no-noise labels differ"));
            }
        }
        let rate = flips as f64 / segments as f64;
        let band = 3.0 * (rho * (1.0 - rho) / segments as f64).sqrt();
        if (rate - rho).abs() > band {
            failures.push(format!("δ={delta} ρ={rho}: flip rate {rate:.4} outside {rho} ± {band:.4}"));
        }
    }
    failures
}
