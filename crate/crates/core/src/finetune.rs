//! Fine-tuning on a small annotated subset with a two-layer classification
//! head, and the resulting static hand-shape feature extractor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Bound, ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode, encode_image, init_encoder, EncoderConfig, ENCODER_PREFIX};
use crate::error::{ensure, invalid, Result};
use crate::metrics::accuracy;
use crate::rng::{mix_seed, Rng};

pub const CLASSIFIER_PREFIX: &str = "cls.";
pub const NUM_HAND_SHAPES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub labeled_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.10,
            epochs: 60,
            lr: 1e-4,
            freeze_encoder: true,
            batch_size: 32,
            hidden_dim: 64,
            num_classes: NUM_HAND_SHAPES,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0,
            "labeled_fraction must be in (0, 1], got {}",
            self.labeled_fraction
        );
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.hidden_dim > 0, "hidden_dim must be positive");
        ensure!(self.num_classes >= 2, "num_classes must be at least 2");
        Ok(())
    }
}

/// Stratified selection: for each class, `round(fraction × count)` examples
/// (at least one) drawn without replacement. Returns sorted indices.
pub fn select_annotated_subset(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "fraction must be in (0, 1], got {fraction}"
    );
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        ensure!(l < num_classes, "label {l} at index {i} out of range for {num_classes} classes");
        by_class[l].push(i);
    }
    let mut chosen = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        ensure!(!members.is_empty(), "class {c} has no examples");
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        rng.shuffle(members);
        chosen.extend_from_slice(&members[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn init_classifier(feature_dim: usize, cfg: &FinetuneConfig, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.init_he("cls.fc1.w", &[feature_dim, cfg.hidden_dim], feature_dim, rng);
    p.init_const("cls.fc1.b", &[cfg.hidden_dim], 0.0);
    p.init_glorot("cls.fc2.w", &[cfg.hidden_dim, cfg.num_classes], cfg.hidden_dim, cfg.num_classes, rng);
    p.init_const("cls.fc2.b", &[cfg.num_classes], 0.0);
    p
}

/// `logits = FC2·relu(FC1·h + b1) + b2` for `h` of shape `[D]` or `[m, D]`.
pub fn classify(tape: &mut Tape, params: &Bound, h: Var) -> Result<Var> {
    let d = tape.value(params["cls.fc1.w"]).shape()[0];
    let rows = match tape.shape(h) {
        [n] if *n == d => 1,
        [m, n] if *n == d => *m,
        s => return Err(invalid!("classifier expects features of width {d}, got {s:?}")),
    };
    let h = tape.reshape(h, &[rows, d])?;
    let a = tape.matmul(h, params["cls.fc1.w"])?;
    let a = tape.add_row(a, params["cls.fc1.b"])?;
    let a = tape.relu(a);
    let o = tape.matmul(a, params["cls.fc2.w"])?;
    tape.add_row(o, params["cls.fc2.b"])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits.data().chunks(k).map(argmax).collect()
}

/// Output of [`finetune`] and [`train_classifier`].
#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    /// Encoder (`enc.*`) and classifier (`cls.*`) parameters.
    pub params: ParamStore,
    /// Accuracy on the training images after each epoch.
    pub history: Vec<f64>,
}

const STREAM_HEAD_INIT: u64 = 0x21;
const STREAM_SHUFFLE: u64 = 0x22;

/// Pure inference: `h = f(x)` through the (fine-tuned) encoder.
pub fn extract_feature(params: &ParamStore, enc_cfg: &EncoderConfig, img: &Tensor) -> Result<Tensor> {
    encode_image(params, enc_cfg, img)
}

pub fn extract_features(params: &ParamStore, enc_cfg: &EncoderConfig, imgs: &[Tensor]) -> Result<Vec<Tensor>> {
    imgs.iter().map(|x| extract_feature(params, enc_cfg, x)).collect()
}

fn stack_features(feats: &[&Tensor], d: usize) -> Result<Tensor> {
    let data: Vec<f64> = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(data, &[feats.len(), d])
}

/// Class predictions for a batch of images.
pub fn predict(params: &ParamStore, enc_cfg: &EncoderConfig, imgs: &[Tensor]) -> Result<Vec<usize>> {
    let feats = extract_features(params, enc_cfg, imgs)?;
    predict_from_features(params, &feats.iter().collect::<Vec<_>>(), enc_cfg.feature_dim)
}

fn predict_from_features(params: &ParamStore, feats: &[&Tensor], d: usize) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.subset(CLASSIFIER_PREFIX).bind_frozen(&mut tape);
    let h = tape.constant(stack_features(feats, d)?);
    let logits = classify(&mut tape, &bound, h)?;
    Ok(argmax_rows(tape.value(logits)))
}

/// Train a classification head (and, unless frozen, the encoder) on labeled
/// images starting from `init`, which must hold `enc.*` parameters.
pub fn train_classifier(
    init: &ParamStore,
    images: &[Tensor],
    labels: &[usize],
    enc_cfg: &EncoderConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    ensure!(!images.is_empty(), "no training images");
    ensure!(images.len() == labels.len(), "{} images but {} labels", images.len(), labels.len());
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(invalid!("label {bad} out of range for {} classes", cfg.num_classes));
    }
    let mut params = init_encoder(enc_cfg, &mut Rng::new(0))?;
    params.load_matching(init, ENCODER_PREFIX)?;
    params.merge(&init_classifier(
        enc_cfg.feature_dim,
        cfg,
        &mut Rng::new(seed).derive(STREAM_HEAD_INIT),
    ));
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let d = enc_cfg.feature_dim;

    // A frozen encoder maps every image to a fixed feature, computed once.
    let frozen_feats = if cfg.freeze_encoder {
        Some(extract_features(&params, enc_cfg, images)?)
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        let order = Rng::new(mix_seed(seed, &[STREAM_SHUFFLE, epoch as u64])).permutation(images.len());
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |name| {
                !(cfg.freeze_encoder && name.starts_with(ENCODER_PREFIX))
            });
            let h = match &frozen_feats {
                Some(feats) => {
                    let rows: Vec<&Tensor> = batch.iter().map(|&i| &feats[i]).collect();
                    tape.constant(stack_features(&rows, d)?)
                }
                None => {
                    let mut hs = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let x = tape.constant(images[i].clone());
                        let h = encode(&mut tape, &bound, enc_cfg, x)?;
                        hs.push(tape.reshape(h, &[1, d])?);
                    }
                    tape.concat_rows(&hs)?
                }
            };
            let logits = classify(&mut tape, &bound, h)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            adam.step(&mut params, &bound.gradients(&tape))?;
        }
        let preds = match &frozen_feats {
            Some(feats) => predict_from_features(&params, &feats.iter().collect::<Vec<_>>(), d)?,
            None => predict(&params, enc_cfg, images)?,
        };
        history.push(accuracy(&preds, labels)?);
    }
    Ok(FinetuneOutput { params, history })
}

/// Fine-tune from a pretrained checkpoint on an annotated subset. The
/// projection head of the checkpoint is discarded.
pub fn finetune(
    pretrained: &ParamStore,
    subset_images: &[Tensor],
    subset_labels: &[usize],
    enc_cfg: &EncoderConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutput> {
    train_classifier(pretrained, subset_images, subset_labels, enc_cfg, cfg, seed)
}

/// `epoch,subset_accuracy` CSV.
pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,subset_accuracy\n");
    for (e, a) in history.iter().enumerate() {
        out.push_str(&format!("{e},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fraction_selects_everything() {
        let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();
        let s = select_annotated_subset(&labels, 8, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!(s, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_ten_percent() {
        let labels: Vec<usize> = (0..800).map(|i| i % 8).collect();
        let s = select_annotated_subset(&labels, 8, 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(s.len(), 80);
        for c in 0..8 {
            assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        let again = select_annotated_subset(&labels, 8, 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn minimum_one_per_class_and_empty_class_error() {
        let labels = vec![0, 0, 0, 1];
        let s = select_annotated_subset(&labels, 2, 0.1, &mut Rng::new(2)).unwrap();
        assert_eq!(s.len(), 2);
        assert!(select_annotated_subset(&labels, 3, 0.5, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = FinetuneConfig {
            hidden_dim: 4,
            num_classes: 3,
            ..Default::default()
        };
        let mut p = init_classifier(5, &cfg, &mut Rng::new(0));
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::full(&[5], 1.3));
        let l = classify(&mut tape, &b, h).unwrap();
        assert_eq!(tape.shape(l), &[1, 3]);
        assert!(tape.data(l).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_matches_direct_evaluation() {
        let cfg = FinetuneConfig {
            hidden_dim: 6,
            num_classes: 4,
            ..Default::default()
        };
        let mut rng = Rng::new(3);
        let mut p = init_classifier(5, &cfg, &mut rng);
        p.init_normal("cls.fc1.b", &[6], 0.5, &mut rng);
        p.init_normal("cls.fc2.b", &[4], 0.5, &mut rng);
        let h: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (w1, b1) = (p.get("cls.fc1.w").unwrap().data(), p.get("cls.fc1.b").unwrap().data());
        let (w2, b2) = (p.get("cls.fc2.w").unwrap().data(), p.get("cls.fc2.b").unwrap().data());
        let hid: Vec<f64> = (0..6)
            .map(|j| ((0..5).map(|i| h[i] * w1[i * 6 + j]).sum::<f64>() + b1[j]).max(0.0))
            .collect();
        let direct: Vec<f64> = (0..4)
            .map(|k| (0..6).map(|j| hid[j] * w2[j * 4 + k]).sum::<f64>() + b2[k])
            .collect();
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let hv = tape.constant(Tensor::from_vec(h, &[5]).unwrap());
        let l = classify(&mut tape, &b, hv).unwrap();
        for (a, e) in tape.data(l).iter().zip(&direct) {
            assert!((a - e).abs() < 1e-12);
        }
        // argmax is unchanged by a common shift of the output bias
        let before = argmax_rows(tape.value(l));
        let shifted: Vec<f64> = b2.iter().map(|v| v + 3.0).collect();
        let mut q = p.clone();
        q.insert("cls.fc2.b", Tensor::from_vec(shifted, &[4]).unwrap());
        let mut tape2 = Tape::new();
        let bq = q.bind_frozen(&mut tape2);
        let hv2 = tape2.constant(tape.value(hv).clone());
        let l2 = classify(&mut tape2, &bq, hv2).unwrap();
        assert_eq!(before, argmax_rows(tape2.value(l2)));
    }
}
