//! Stage orchestration shared by the command line and the tests: splits,
//! the three training stages, the fusion recognizer, evaluation and k-fold
//! cross validation.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augmentation::resize_to;
use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::contrastive::{pretrain, PretrainOutput};
use crate::corpus::{kfold, split_80_20, Corpus, SentenceSample, StaticSet};
use crate::encoder::{init_encoder, EncoderConfig};
use crate::error::{ensure, Result};
use crate::finetune::{extract_features, finetune, predict, select_annotated_subset, train_classifier, FinetuneConfig, FinetuneOutput};
use crate::fusion::{recognize_phonemes, train_fusion, FusionModel, FusionTrainOutput};
use crate::metrics::{ClassificationSummary, EvalReport, SampleMetrics, SequenceSummary};
use crate::rng::{mix_seed, Rng};
use crate::sequence::{decode, train_sequence, SequenceConfig, SequenceSample, SequenceTrainOutput};

pub const PRETRAIN_CKPT: &str = "pretrain.csw";
pub const FINETUNE_CKPT: &str = "finetune.csw";
pub const SEQUENCE_CKPT: &str = "sequence.csw";
pub const FUSION_CKPT: &str = "fusion.csw";

pub const TASK_SHAPE: &str = "hand_shape";
pub const TASK_SHAPE_SEQ: &str = "hand_shape_sequence";
pub const TASK_PHONEME: &str = "phoneme";

const STREAM_STATIC_SPLIT: u64 = 0x61;
const STREAM_SENTENCE_SPLIT: u64 = 0x62;
const STREAM_SUBSET: u64 = 0x63;
const STREAM_FOLDS: u64 = 0x64;
const STREAM_PRETRAIN: u64 = 0x65;
const STREAM_FINETUNE: u64 = 0x66;
const STREAM_SEQUENCE: u64 = 0x67;
const STREAM_FUSION: u64 = 0x68;
const STREAM_BASELINE: u64 = 0x69;

/// Train/test indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn static_split(n: usize, seed: u64) -> Split {
    let (train, test) = split_80_20(n, &mut Rng::new(mix_seed(seed, &[STREAM_STATIC_SPLIT])));
    Split { train, test }
}

pub fn sentence_split(n: usize, seed: u64) -> Split {
    let (train, test) = split_80_20(n, &mut Rng::new(mix_seed(seed, &[STREAM_SENTENCE_SPLIT])));
    Split { train, test }
}

/// `k` folds of `n` items; fold `f` as the test part of split `f`.
pub fn fold_splits(n: usize, k: usize, seed: u64, stream: u64) -> Result<Vec<Split>> {
    let folds = kfold(n, k, &mut Rng::new(mix_seed(seed, &[STREAM_FOLDS, stream])))?;
    Ok((0..k)
        .map(|f| Split {
            train: folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect(),
            test: folds[f].clone(),
        })
        .collect())
}

pub fn encoder_inputs(images: &[Tensor], enc_cfg: &EncoderConfig) -> Vec<Tensor> {
    images.iter().map(|i| resize_to(i, enc_cfg.input_size)).collect()
}

/// Contrastive pretraining on unlabeled static images.
pub fn run_pretrain(cfg: &RunConfig, images: &[Tensor]) -> Result<PretrainOutput> {
    pretrain(images, &cfg.encoder, &cfg.augment, &cfg.contrastive, mix_seed(cfg.seed, &[STREAM_PRETRAIN]))
}

/// Fine-tuning on a stratified `labeled_fraction` of `train` with clean labels.
/// Returns the output and the chosen subset (indices into `train`).
pub fn run_finetune(cfg: &RunConfig, pretrained: &ParamStore, train: &StaticSet) -> Result<(FinetuneOutput, Vec<usize>)> {
    let ft = &cfg.finetune;
    let subset = select_annotated_subset(
        &train.clean_labels,
        ft.num_classes,
        ft.labeled_fraction,
        &mut Rng::new(mix_seed(cfg.seed, &[STREAM_SUBSET])),
    )?;
    let part = train.select(&subset);
    let images = encoder_inputs(&part.images, &cfg.encoder);
    let out = finetune(pretrained, &images, &part.clean_labels, &cfg.encoder, ft, mix_seed(cfg.seed, &[STREAM_FINETUNE]))?;
    Ok((out, subset))
}

/// Fully supervised baseline: randomly initialized encoder and head trained
/// end to end on every training image with its noisy label.
pub fn run_supervised_baseline(cfg: &RunConfig, ft: &FinetuneConfig, train: &StaticSet) -> Result<FinetuneOutput> {
    let seed = mix_seed(cfg.seed, &[STREAM_BASELINE]);
    let init = init_encoder(&cfg.encoder, &mut Rng::new(seed))?;
    let images = encoder_inputs(&train.images, &cfg.encoder);
    let ft = FinetuneConfig { freeze_encoder: false, ..ft.clone() };
    train_classifier(&init, &images, &train.noisy_labels, &cfg.encoder, &ft, seed)
}

/// Predictions and clean-label accuracy of a classifier on `set`.
pub fn classify_set(params: &ParamStore, enc_cfg: &EncoderConfig, set: &StaticSet) -> Result<ClassificationSummary> {
    let preds = predict(params, enc_cfg, &encoder_inputs(&set.images, enc_cfg))?;
    ClassificationSummary::new(TASK_SHAPE, &preds, &set.clean_labels, crate::alphabet::NUM_SHAPES)
}

/// Per-frame hand-shape features with the clean shape transcript as target
/// (labels shifted by one; 0 is the blank).
pub fn shape_sequence_samples(sentences: &[&SentenceSample], encoder: &ParamStore, enc_cfg: &EncoderConfig) -> Result<Vec<SequenceSample>> {
    sentences
        .iter()
        .map(|s| {
            let feats = extract_features(encoder, enc_cfg, &encoder_inputs(&s.hand_rois, enc_cfg))?;
            let d = enc_cfg.feature_dim;
            let data = feats.iter().flat_map(|f| f.data().iter().copied()).collect();
            Ok(SequenceSample {
                features: Tensor::from_vec(data, &[feats.len(), d])?,
                target: s.shape_sequence(false).iter().map(|c| c + 1).collect(),
            })
        })
        .collect()
}

pub fn sequence_config(cfg: &RunConfig) -> SequenceConfig {
    cfg.sequence.clone()
}

pub fn run_train_seq(cfg: &RunConfig, train: &[SequenceSample], heldout: &[SequenceSample]) -> Result<SequenceTrainOutput> {
    train_sequence(train, heldout, &sequence_config(cfg), mix_seed(cfg.seed, &[STREAM_SEQUENCE]))
}

pub fn run_train_fusion(
    cfg: &RunConfig,
    corpus: &Corpus,
    encoder: &ParamStore,
    train: &[SentenceSample],
    heldout: &[SentenceSample],
) -> Result<FusionTrainOutput> {
    train_fusion(train, heldout, encoder, &cfg.encoder, &corpus.alphabet, &cfg.fusion, mix_seed(cfg.seed, &[STREAM_FUSION]))
}

pub fn select<'a, T>(items: &'a [T], idx: &[usize]) -> Vec<&'a T> {
    idx.iter().map(|&i| &items[i]).collect()
}

fn cloned<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Trained artifacts available for evaluation.
pub struct Models<'a> {
    pub classifier: Option<&'a ParamStore>,
    pub sequence: Option<&'a ParamStore>,
    pub fusion: Option<&'a FusionModel>,
}

/// Scores every available model on the held-out parts of `corpus`.
pub fn evaluate(cfg: &RunConfig, corpus: &Corpus, models: &Models<'_>) -> Result<EvalReport> {
    let mut report = EvalReport::new(json!({
        "seed": cfg.seed,
        "corpus_seed": corpus.seed,
        "config": serde_json::to_value(cfg).expect("config serializes"),
    }));
    let st_split = static_split(corpus.static_set.len(), cfg.seed);
    let se_split = sentence_split(corpus.sentences.len(), cfg.seed);
    let heldout = select(&corpus.sentences, &se_split.test);
    if let Some(cls) = models.classifier {
        ensure!(!st_split.test.is_empty(), "no static test images");
        report.classification.push(classify_set(cls, &cfg.encoder, &corpus.static_set.select(&st_split.test))?);
    }
    if let Some(seq) = models.sequence {
        let encoder = models.classifier.ok_or_else(|| crate::error::invalid!("sequence evaluation needs the fine-tuned encoder"))?;
        let samples = shape_sequence_samples(&heldout, encoder, &cfg.encoder)?;
        let seq_cfg = sequence_config(cfg);
        for (s, sample) in heldout.iter().zip(&samples) {
            let hyp = decode(seq, &seq_cfg, &sample.features)?;
            report.samples.push(SampleMetrics::new(s.id.clone(), TASK_SHAPE_SEQ, sample.target.clone(), hyp));
        }
        report.sequences.push(SequenceSummary::from_samples(TASK_SHAPE_SEQ, &report.samples)?);
    }
    if let Some(model) = models.fusion {
        for s in &heldout {
            report.samples.push(recognize_phonemes(s, model)?.1);
        }
        report.sequences.push(SequenceSummary::from_samples(TASK_PHONEME, &report.samples)?);
    }
    Ok(report)
}

/// Per-fold scores of the cross-validation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub shape_accuracy: f64,
    pub shape_seq_te: f64,
    pub shape_seq_tc: f64,
    pub phoneme_te: Option<f64>,
    pub phoneme_tc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvalReport {
    pub metadata: serde_json::Value,
    pub folds: Vec<FoldResult>,
    pub shape_accuracy: MeanStd,
    pub shape_seq_te: MeanStd,
    pub shape_seq_tc: MeanStd,
    pub phoneme_te: Option<MeanStd>,
    pub phoneme_tc: Option<MeanStd>,
}

/// Runs one fold from scratch: pretraining, fine-tuning, sequence training
/// and optionally the fusion recognizer, each on the fold's training part.
pub fn run_fold(cfg: &RunConfig, corpus: &Corpus, fold: usize, st: &Split, se: &Split) -> Result<FoldResult> {
    let fold_cfg = RunConfig { seed: mix_seed(cfg.seed, &[STREAM_FOLDS, fold as u64]), ..cfg.clone() };
    let cfg = &fold_cfg;
    let train_static = corpus.static_set.select(&st.train);
    let pre = run_pretrain(cfg, &train_static.images)?;
    let (ft, _) = run_finetune(cfg, &pre.params, &train_static)?;
    let acc = classify_set(&ft.params, &cfg.encoder, &corpus.static_set.select(&st.test))?.accuracy;
    let train_sent = select(&corpus.sentences, &se.train);
    let test_sent = select(&corpus.sentences, &se.test);
    let train_seq = shape_sequence_samples(&train_sent, &ft.params, &cfg.encoder)?;
    let test_seq = shape_sequence_samples(&test_sent, &ft.params, &cfg.encoder)?;
    let seq = run_train_seq(cfg, &train_seq, &[])?;
    let seq_cfg = sequence_config(cfg);
    let pairs = test_seq
        .iter()
        .map(|s| Ok((s.target.clone(), decode(&seq.params, &seq_cfg, &s.features)?)))
        .collect::<Result<Vec<_>>>()?;
    let rates = crate::metrics::phone_error_rate(&pairs)?;
    let (phoneme_te, phoneme_tc) = if cfg.xval.include_fusion {
        let fus = run_train_fusion(cfg, corpus, &ft.params, &cloned(&corpus.sentences, &se.train), &[])?;
        let pairs = test_sent
            .iter()
            .map(|s| Ok((s.phonemes.clone(), recognize_phonemes(s, &fus.model)?.1.hypothesis)))
            .collect::<Result<Vec<_>>>()?;
        let r = crate::metrics::phone_error_rate(&pairs)?;
        (Some(r.te), Some(r.tc))
    } else {
        (None, None)
    };
    Ok(FoldResult { fold, shape_accuracy: acc, shape_seq_te: rates.te, shape_seq_tc: rates.tc, phoneme_te, phoneme_tc })
}

/// Fold partitions of the static set and of the sentences.
pub fn xval_splits(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vec<Split>, Vec<Split>)> {
    Ok((
        fold_splits(corpus.static_set.len(), cfg.xval.folds, cfg.seed, 0)?,
        fold_splits(corpus.sentences.len(), cfg.xval.folds, cfg.seed, 1)?,
    ))
}

pub fn run_xval(cfg: &RunConfig, corpus: &Corpus) -> Result<XvalReport> {
    let (st, se) = xval_splits(cfg, corpus)?;
    let folds = (0..cfg.xval.folds)
        .map(|f| run_fold(cfg, corpus, f, &st[f], &se[f]))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&FoldResult) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
    let opt = |f: fn(&FoldResult) -> Option<f64>| {
        folds.iter().map(f).collect::<Option<Vec<_>>>().map(|v| MeanStd::of(&v))
    };
    Ok(XvalReport {
        metadata: json!({ "seed": cfg.seed, "config": serde_json::to_value(cfg).expect("config serializes") }),
        shape_accuracy: col(|r| r.shape_accuracy),
        shape_seq_te: col(|r| r.shape_seq_te),
        shape_seq_tc: col(|r| r.shape_seq_tc),
        phoneme_te: opt(|r| r.phoneme_te),
        phoneme_tc: opt(|r| r.phoneme_tc),
        folds,
    })
}
