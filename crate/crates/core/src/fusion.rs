//! Three-stream phoneme recognizer: a lip CNN, a hand-position MLP and the
//! fine-tuned hand-shape encoder, concatenated per frame and decoded by the
//! sequence model with a phoneme vocabulary.

use serde::{Deserialize, Serialize};

use crate::alphabet::PhonemeAlphabet;
use crate::augmentation::resize_to;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::corpus::SentenceSample;
use crate::encoder::{encode, EncoderConfig, ENCODER_PREFIX};
use crate::error::{ensure, invalid, Result};
use crate::finetune::extract_features;
use crate::metrics::{phone_error_rate, SampleMetrics};
use crate::rng::Rng;
use crate::sequence::{
    ctc_greedy_decode, encode_to_logits, init_sequence, run_ctc_loop, CtcLoop, SequenceConfig, SequenceEpoch, BLANK,
};

pub const FUSION_PREFIX: &str = "fus.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipCnnConfig {
    pub filters: usize,
    pub kernel: usize,
    /// Stride of each convolution (the down-sampling factor).
    pub stride: usize,
    /// Zero padding of each convolution.
    pub padding: usize,
    pub roi_size: usize,
    pub d_lip: usize,
}

impl Default for LipCnnConfig {
    fn default() -> Self {
        Self { filters: 8, kernel: 7, stride: 3, padding: 3, roi_size: 48, d_lip: 32 }
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|r| r / s + 1)
}

impl LipCnnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.filters == 8, "the lip CNN uses 8 filters, got {}", self.filters);
        ensure!(self.kernel == 7, "the lip CNN uses 7x7 kernels, got {}", self.kernel);
        ensure!(self.stride >= 1, "stride must be positive");
        ensure!(self.d_lip >= 1, "d_lip must be positive");
        self.flat_dim().map(|_| ())
    }

    /// Side of the second feature map.
    pub fn map_size(&self) -> Result<usize> {
        conv_out(self.roi_size, self.kernel, self.stride, self.padding)
            .and_then(|n| conv_out(n, self.kernel, self.stride, self.padding))
            .ok_or_else(|| invalid!("lip ROI {} too small for two {}x{} convolutions", self.roi_size, self.kernel, self.kernel))
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let m = self.map_size()?;
        Ok(self.filters * m * m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub lip: LipCnnConfig,
    pub pos_hidden: usize,
    pub d_pos: usize,
    /// Keep the hand-shape encoder fixed during fusion training.
    pub freeze_shape_encoder: bool,
    /// Sequence model; `d_in` is ignored (the fused features are already
    /// `d_model` wide) and `vocab` is taken from the alphabet.
    pub sequence: SequenceConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lip: LipCnnConfig::default(),
            pos_hidden: 16,
            d_pos: 8,
            freeze_shape_encoder: true,
            sequence: SequenceConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.lip.validate()?;
        ensure!(self.pos_hidden >= 1 && self.d_pos >= 1, "position MLP sizes must be positive");
        self.sequence.validate()
    }

    pub fn sequence_for(&self, alphabet: &PhonemeAlphabet) -> SequenceConfig {
        SequenceConfig { d_in: self.sequence.d_model, vocab: alphabet.vocab(), ..self.sequence.clone() }
    }
}

fn param(bound: &Bound, name: &str) -> Result<Var> {
    bound.get(name).ok_or_else(|| invalid!("missing parameter {name}"))
}

/// Per frame: two stride-`s` convolutions with ReLU, flatten, linear map.
/// Returns `[T, d_lip]`.
pub fn lip_cnn(tape: &mut Tape, bound: &Bound, cfg: &LipCnnConfig, frames: &[Var]) -> Result<Var> {
    ensure!(!frames.is_empty(), "lip_cnn needs at least one frame");
    let r = cfg.roi_size;
    let flat = cfg.flat_dim()?;
    let k1 = param(bound, "fus.lip.conv1.w")?;
    let k2 = param(bound, "fus.lip.conv2.w")?;
    let mut rows = Vec::with_capacity(frames.len());
    for &f in frames {
        ensure!(tape.shape(f) == [3, r, r], "lip ROI must be [3, {r}, {r}], got {:?}", tape.shape(f));
        let a = tape.conv2d(f, k1, cfg.stride, cfg.padding)?;
        let a = tape.relu(a);
        let a = tape.conv2d(a, k2, cfg.stride, cfg.padding)?;
        let a = tape.relu(a);
        rows.push(tape.reshape(a, &[1, flat])?);
    }
    let x = tape.concat_rows(&rows)?;
    let y = tape.matmul(x, param(bound, "fus.lip.fc.w")?)?;
    tape.add_row(y, param(bound, "fus.lip.fc.b")?)
}

/// `relu(c·W1 + b1)·W2 + b2` on `coords[T, 2]`.
pub fn hand_pos_mlp(tape: &mut Tape, bound: &Bound, coords: Var) -> Result<Var> {
    ensure!(
        tape.shape(coords).len() == 2 && tape.shape(coords)[1] == 2,
        "hand coordinates must be [T, 2], got {:?}",
        tape.shape(coords)
    );
    ensure!(tape.data(coords).iter().all(|v| v.is_finite()), "hand coordinates must be finite");
    let h = tape.matmul(coords, param(bound, "fus.pos.w1")?)?;
    let h = tape.add_row(h, param(bound, "fus.pos.b1")?)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, param(bound, "fus.pos.w2")?)?;
    tape.add_row(y, param(bound, "fus.pos.b2")?)
}

/// Concatenates `(lip, pos, shape)` per frame and maps to `d_model`.
pub fn fuse(tape: &mut Tape, bound: &Bound, lip: Var, pos: Var, shape: Var) -> Result<Var> {
    let t = tape.shape(lip)[0];
    ensure!(
        tape.shape(pos)[0] == t && tape.shape(shape)[0] == t,
        "stream lengths differ: lip {t}, position {}, shape {}",
        tape.shape(pos)[0],
        tape.shape(shape)[0]
    );
    let cat = tape.concat_cols(&[lip, pos, shape])?;
    let y = tape.matmul(cat, param(bound, "fus.proj.w")?)?;
    tape.add_row(y, param(bound, "fus.proj.b")?)
}

/// Fusion-stream parameters (`fus.*`) for hand-shape features of width `d_shape`.
pub fn init_fusion_streams(cfg: &FusionConfig, d_shape: usize, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let l = &cfg.lip;
    let (f, k) = (l.filters, l.kernel);
    let flat = l.flat_dim()?;
    let d_model = cfg.sequence.d_model;
    let mut p = ParamStore::new();
    p.init_he("fus.lip.conv1.w", &[f, 3, k, k], 3 * k * k, &mut rng.derive(0));
    p.init_he("fus.lip.conv2.w", &[f, f, k, k], f * k * k, &mut rng.derive(1));
    p.init_glorot("fus.lip.fc.w", &[flat, l.d_lip], flat, l.d_lip, &mut rng.derive(2));
    p.init_const("fus.lip.fc.b", &[l.d_lip], 0.0);
    p.init_he("fus.pos.w1", &[2, cfg.pos_hidden], 2, &mut rng.derive(3));
    p.init_const("fus.pos.b1", &[cfg.pos_hidden], 0.0);
    p.init_glorot("fus.pos.w2", &[cfg.pos_hidden, cfg.d_pos], cfg.pos_hidden, cfg.d_pos, &mut rng.derive(4));
    p.init_const("fus.pos.b2", &[cfg.d_pos], 0.0);
    let width = l.d_lip + cfg.d_pos + d_shape;
    p.init_glorot("fus.proj.w", &[width, d_model], width, d_model, &mut rng.derive(5));
    p.init_const("fus.proj.b", &[d_model], 0.0);
    Ok(p)
}

/// Trained recognizer: fusion streams, sequence model and hand-shape encoder.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub params: ParamStore,
    pub cfg: FusionConfig,
    pub enc_cfg: EncoderConfig,
    pub alphabet: PhonemeAlphabet,
}

/// Model inputs of one sentence. Hand-shape features are precomputed when the
/// encoder is frozen; otherwise the (resized) hand ROIs are kept.
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub lips: Vec<Tensor>,
    pub coords: Tensor,
    pub shape_features: Option<Tensor>,
    pub hands: Vec<Tensor>,
}

impl FusionInput {
    pub fn new(sample: &SentenceSample, encoder: &ParamStore, enc_cfg: &EncoderConfig, precompute: bool) -> Result<Self> {
        let hands: Vec<Tensor> = sample.hand_rois.iter().map(|h| resize_to(h, enc_cfg.input_size)).collect();
        let shape_features = if precompute {
            let feats = extract_features(encoder, enc_cfg, &hands)?;
            let d = enc_cfg.feature_dim;
            let data = feats.iter().flat_map(|f| f.data().iter().copied()).collect();
            Some(Tensor::from_vec(data, &[feats.len(), d])?)
        } else {
            None
        };
        Ok(Self {
            lips: sample.lip_rois.clone(),
            coords: sample.coords_tensor(),
            shape_features,
            hands: if precompute { Vec::new() } else { hands },
        })
    }
}

/// Frame logits `[T, |alphabet| + 1]`.
pub fn fusion_logits(tape: &mut Tape, bound: &Bound, model_cfg: (&FusionConfig, &EncoderConfig, &SequenceConfig), input: &FusionInput) -> Result<Var> {
    let (cfg, enc_cfg, seq_cfg) = model_cfg;
    let lips: Vec<Var> = input.lips.iter().map(|l| tape.constant(l.clone())).collect();
    let lip = lip_cnn(tape, bound, &cfg.lip, &lips)?;
    let coords = tape.constant(input.coords.clone());
    let pos = hand_pos_mlp(tape, bound, coords)?;
    let shape = match &input.shape_features {
        Some(f) => tape.constant(f.clone()),
        None => {
            let d = enc_cfg.feature_dim;
            let mut rows = Vec::with_capacity(input.hands.len());
            for h in &input.hands {
                let x = tape.constant(h.clone());
                let f = encode(tape, bound, enc_cfg, x)?;
                rows.push(tape.reshape(f, &[1, d])?);
            }
            tape.concat_rows(&rows)?
        }
    };
    let c = fuse(tape, bound, lip, pos, shape)?;
    encode_to_logits(tape, bound, seq_cfg, c)
}

#[derive(Clone, Debug)]
pub struct FusionTrainOutput {
    pub model: FusionModel,
    pub history: Vec<SequenceEpoch>,
}

const STREAM_FUSION_INIT: u64 = 0x41;
const STREAM_SEQ_INIT: u64 = 0x42;

fn check_language(sample: &SentenceSample, alphabet: &PhonemeAlphabet) -> Result<()> {
    ensure!(
        sample.language == alphabet.language,
        "sentence {} is {} but the alphabet is {}",
        sample.id,
        sample.language,
        alphabet.language
    );
    Ok(())
}

/// Trains the fusion streams and sequence model with CTC on phoneme targets.
/// `shape_encoder` must hold the fine-tuned `enc.*` parameters.
pub fn train_fusion(
    train: &[SentenceSample],
    heldout: &[SentenceSample],
    shape_encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    alphabet: &PhonemeAlphabet,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<FusionTrainOutput> {
    cfg.validate()?;
    alphabet.validate()?;
    let seq_cfg = cfg.sequence_for(alphabet);
    for (i, s) in train.iter().chain(heldout).enumerate() {
        check_language(s, alphabet)?;
        crate::sequence::check_target(&s.phonemes, s.num_frames(), seq_cfg.vocab, BLANK)
            .map_err(|e| invalid!("sentence {i} ({}): {e}", s.id))?;
    }
    let root = Rng::new(seed);
    let mut params = init_fusion_streams(cfg, enc_cfg.feature_dim, &mut root.derive(STREAM_FUSION_INIT))?;
    let mut seq = init_sequence(&seq_cfg, &mut root.derive(STREAM_SEQ_INIT))?;
    seq.remove("seq.in.w");
    seq.remove("seq.in.b");
    params.merge(&seq);
    params.merge(&shape_encoder.subset(ENCODER_PREFIX));
    ensure!(
        params.names().any(|n| n.starts_with(ENCODER_PREFIX)),
        "shape encoder parameters (enc.*) are missing"
    );

    let frozen = cfg.freeze_shape_encoder;
    let inputs = train
        .iter()
        .map(|s| FusionInput::new(s, &params, enc_cfg, frozen))
        .collect::<Result<Vec<_>>>()?;
    let held_inputs = heldout
        .iter()
        .map(|s| FusionInput::new(s, &params, enc_cfg, true))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<usize>> = train.iter().map(|s| s.phonemes.clone()).collect();
    let sc = &cfg.sequence;
    let hp = CtcLoop { epochs: sc.epochs, lr: sc.lr, batch_size: sc.batch_size, grad_clip: sc.grad_clip, seed };
    let history = run_ctc_loop(
        &mut params,
        &targets,
        hp,
        |name| !(frozen && name.starts_with(ENCODER_PREFIX)),
        |tape, bound, i| fusion_logits(tape, bound, (cfg, enc_cfg, &seq_cfg), &inputs[i]),
        |p| {
            if heldout.is_empty() {
                return Ok(None);
            }
            let pairs = heldout
                .iter()
                .zip(&held_inputs)
                .map(|(s, inp)| Ok((s.phonemes.clone(), decode_input(p, cfg, enc_cfg, &seq_cfg, inp)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(phone_error_rate(&pairs)?.te))
        },
    )?;
    let model = FusionModel { params, cfg: cfg.clone(), enc_cfg: enc_cfg.clone(), alphabet: alphabet.clone() };
    Ok(FusionTrainOutput { model, history })
}

fn decode_input(
    params: &ParamStore,
    cfg: &FusionConfig,
    enc_cfg: &EncoderConfig,
    seq_cfg: &SequenceConfig,
    input: &FusionInput,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let logits = fusion_logits(&mut tape, &bound, (cfg, enc_cfg, seq_cfg), input)?;
    Ok(ctc_greedy_decode(tape.data(logits), seq_cfg.vocab, BLANK))
}

/// Decodes one sentence into phoneme symbols and scores it against the
/// reference transcription.
pub fn recognize_phonemes(sample: &SentenceSample, model: &FusionModel) -> Result<(Vec<String>, SampleMetrics)> {
    check_language(sample, &model.alphabet)?;
    let seq_cfg = model.cfg.sequence_for(&model.alphabet);
    let input = FusionInput::new(sample, &model.params, &model.enc_cfg, true)?;
    let hyp = decode_input(&model.params, &model.cfg, &model.enc_cfg, &seq_cfg, &input)?;
    let symbols = hyp
        .iter()
        .map(|&i| model.alphabet.symbol(i).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    Ok((symbols, SampleMetrics::new(sample.id.clone(), "phoneme", sample.phonemes.clone(), hyp)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lip_geometry() {
        let c = LipCnnConfig::default();
        assert_eq!(c.map_size().unwrap(), 6);
        assert_eq!(c.flat_dim().unwrap(), 288);
        let small = LipCnnConfig { roi_size: 24, ..c.clone() };
        assert_eq!(small.map_size().unwrap(), 3);
        assert!(LipCnnConfig { filters: 4, ..c.clone() }.validate().is_err());
        assert!(LipCnnConfig { roi_size: 4, padding: 0, ..c }.validate().is_err());
    }
}
