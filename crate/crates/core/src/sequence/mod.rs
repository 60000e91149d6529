//! Sequential hand-shape encoder: a stacked Bi-LSTM whose output is refined by
//! a self-attention stack and added back through a shortcut, trained with CTC.

mod attention;
mod ctc;
mod lstm;

pub use attention::{
    init_san, mha, san_block, san_forward, san_forward_with_weights, san_output_projection_names, MhaOutput,
    MhaWeights, FFN_MULT, LAYER_NORM_EPS,
};
pub use ctc::{check_target, ctc_greedy_decode, ctc_loss, ctc_loss_and_grad, min_frames};
pub use lstm::{bilstm_forward, init_bilstm, lstm_param_name, lstm_step, mirror_bilstm, LstmWeights};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Bound, Gradients, ParamStore, Tape, Tensor, Var};
use crate::error::{ensure, invalid, Result};
use crate::metrics::phone_error_rate;
use crate::rng::{mix_seed, Rng};

pub const SEQUENCE_PREFIX: &str = "seq.";
pub const BLANK: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub bilstm_layers: usize,
    pub san_layers: usize,
    pub heads: usize,
    /// Label classes plus the blank.
    pub vocab: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub use_positional_encoding: bool,
    /// `false` drops the attention stack: the output is the Bi-LSTM output alone.
    pub use_san: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            d_in: 128,
            d_model: 128,
            bilstm_layers: 2,
            san_layers: 3,
            heads: 16,
            vocab: 9,
            lr: 1e-3,
            batch_size: 1,
            epochs: 30,
            use_positional_encoding: false,
            use_san: true,
            grad_clip: 0.0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_in > 0, "d_in must be positive");
        ensure!(
            self.heads >= 1 && self.d_model % self.heads == 0,
            "d_model {} must be divisible by heads {}",
            self.d_model,
            self.heads
        );
        ensure!(self.d_model % 2 == 0, "d_model must be even, got {}", self.d_model);
        ensure!(self.bilstm_layers >= 1, "bilstm_layers must be at least 1");
        ensure!(self.san_layers >= 1, "san_layers must be at least 1");
        ensure!(self.vocab >= 2, "vocab must include the blank and at least one label");
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        Ok(())
    }
}

/// Intermediate and final encoder outputs, all `[T, d_model]`.
#[derive(Clone, Copy, Debug)]
pub struct SequenceFeatures {
    pub s_p: Var,
    /// Absent when the attention stack is disabled.
    pub s_q: Option<Var>,
    pub s_output: Var,
}

const STREAM_INIT: u64 = 0x31;
const STREAM_SHUFFLE: u64 = 0x32;

/// Encoder (`seq.lstm*`, `seq.san*`), input map `seq.in.*` and output layer
/// `seq.out.*`.
pub fn init_sequence(cfg: &SequenceConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.init_glorot("seq.in.w", &[cfg.d_in, d], cfg.d_in, d, &mut rng.derive(0));
    p.init_const("seq.in.b", &[d], 0.0);
    init_bilstm(&mut p, SEQUENCE_PREFIX, d, d, cfg.bilstm_layers, &mut rng.derive(1));
    if cfg.use_san {
        init_san(&mut p, SEQUENCE_PREFIX, d, cfg.san_layers, &mut rng.derive(2));
    }
    p.init_glorot("seq.out.w", &[d, cfg.vocab], d, cfg.vocab, &mut rng.derive(3));
    p.init_const("seq.out.b", &[cfg.vocab], 0.0);
    Ok(p)
}

/// Sinusoidal position table `[T, d]`.
pub fn positional_encoding(frames: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            data[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_vec(data, &[frames, d]).expect("non-empty")
}

/// `s_p = U(c)`, `s_q = V(s_p)`, `s_output = s_p + s_q` for `c[T, d_model]`.
pub fn seq_encode(tape: &mut Tape, bound: &Bound, cfg: &SequenceConfig, c: Var) -> Result<SequenceFeatures> {
    ensure!(
        tape.shape(c).len() == 2 && tape.shape(c)[1] == cfg.d_model,
        "seq_encode expects [T, {}], got {:?}",
        cfg.d_model,
        tape.shape(c)
    );
    let s_p = bilstm_forward(tape, c, bound, SEQUENCE_PREFIX, cfg.bilstm_layers)?;
    if !cfg.use_san {
        return Ok(SequenceFeatures { s_p, s_q: None, s_output: s_p });
    }
    let san_in = if cfg.use_positional_encoding {
        let pe = tape.constant(positional_encoding(tape.shape(s_p)[0], cfg.d_model));
        tape.add(s_p, pe)?
    } else {
        s_p
    };
    let s_q = san_forward(tape, san_in, bound, SEQUENCE_PREFIX, cfg.san_layers, cfg.heads)?;
    let s_output = tape.add(s_p, s_q)?;
    Ok(SequenceFeatures { s_p, s_q: Some(s_q), s_output })
}

/// Frame logits `[T, vocab]` for per-frame input features `x[T, d_in]`.
pub fn sequence_logits(tape: &mut Tape, bound: &Bound, cfg: &SequenceConfig, x: Var) -> Result<Var> {
    let get = |n: &str| bound.get(n).ok_or_else(|| invalid!("missing parameter {n}"));
    let c = tape.matmul(x, get("seq.in.w")?)?;
    let c = tape.add_row(c, get("seq.in.b")?)?;
    encode_to_logits(tape, bound, cfg, c)
}

/// Encoder plus output layer on already projected inputs `c[T, d_model]`.
pub fn encode_to_logits(tape: &mut Tape, bound: &Bound, cfg: &SequenceConfig, c: Var) -> Result<Var> {
    let get = |n: &str| bound.get(n).ok_or_else(|| invalid!("missing parameter {n}"));
    let feats = seq_encode(tape, bound, cfg, c)?;
    let logits = tape.matmul(feats.s_output, get("seq.out.w")?)?;
    tape.add_row(logits, get("seq.out.b")?)
}

/// Greedy transcription of one sentence.
pub fn decode(params: &ParamStore, cfg: &SequenceConfig, features: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(features.clone());
    let logits = sequence_logits(&mut tape, &bound, cfg, x)?;
    Ok(ctc_greedy_decode(tape.data(logits), cfg.vocab, BLANK))
}

/// One training or evaluation sentence: per-frame features and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub features: Tensor,
    pub target: Vec<usize>,
}

/// Rejects the first sample whose shape or target is unusable, naming it.
pub fn validate_corpus(samples: &[SequenceSample], cfg: &SequenceConfig) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let shape = s.features.shape();
        if shape.len() != 2 || shape[1] != cfg.d_in {
            return Err(invalid!("sample {i}: features must be [T, {}], got {shape:?}", cfg.d_in));
        }
        check_target(&s.target, shape[0], cfg.vocab, BLANK).map_err(|e| invalid!("sample {i}: {e}"))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEpoch {
    pub epoch: usize,
    pub mean_ctc_loss: f64,
    /// `None` without a held-out split.
    pub heldout_te: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SequenceTrainOutput {
    pub params: ParamStore,
    pub history: Vec<SequenceEpoch>,
}

/// Hyperparameters of the generic CTC loop shared with the fusion recognizer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CtcLoop {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
}

/// Shuffled mini-batches of sentences, one Adam step per batch on the mean
/// CTC loss. `forward` builds the logits of training sentence `i`; `evaluate`
/// runs after every epoch.
pub(crate) fn run_ctc_loop(
    params: &mut ParamStore,
    targets: &[Vec<usize>],
    hp: CtcLoop,
    trainable: impl Fn(&str) -> bool,
    forward: impl Fn(&mut Tape, &Bound, usize) -> Result<Var>,
    mut evaluate: impl FnMut(&ParamStore) -> Result<Option<f64>>,
) -> Result<Vec<SequenceEpoch>> {
    ensure!(!targets.is_empty() || hp.epochs == 0, "no training sentences");
    let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr));
    let mut history = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let order = Rng::new(mix_seed(hp.seed, &[STREAM_SHUFFLE, epoch as u64])).permutation(targets.len());
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let mut acc: Option<Gradients> = None;
            for &i in batch {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, &trainable);
                let logits = forward(&mut tape, &bound, i)?;
                let loss = ctc_loss(&mut tape, logits, &targets[i], BLANK)?;
                total += tape.value(loss).item();
                tape.backward(loss)?;
                let g = bound.gradients(&tape);
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for (name, v) in g {
                            a.entry(name)
                                .and_modify(|x| x.iter_mut().zip(&v).for_each(|(x, y)| *x += y))
                                .or_insert(v);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                grads.values_mut().flatten().for_each(|g| *g *= k);
            }
            clip_gradients(&mut grads, hp.grad_clip);
            adam.step(params, &grads)?;
        }
        history.push(SequenceEpoch {
            epoch,
            mean_ctc_loss: total / targets.len() as f64,
            heldout_te: evaluate(params)?,
        });
    }
    Ok(history)
}

/// Held-out `T_e` (micro-averaged) of greedy transcriptions.
pub fn evaluate_sequence(params: &ParamStore, cfg: &SequenceConfig, samples: &[SequenceSample]) -> Result<f64> {
    let pairs = samples
        .iter()
        .map(|s| Ok((s.target.clone(), decode(params, cfg, &s.features)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(phone_error_rate(&pairs)?.te)
}

/// Trains input map, encoder and output layer with CTC, one Adam step per
/// `batch_size` sentences, evaluating held-out `T_e` after every epoch.
pub fn train_sequence(
    train: &[SequenceSample],
    heldout: &[SequenceSample],
    cfg: &SequenceConfig,
    seed: u64,
) -> Result<SequenceTrainOutput> {
    cfg.validate()?;
    validate_corpus(train, cfg)?;
    validate_corpus(heldout, cfg).map_err(|e| invalid!("held-out {e}"))?;
    let mut params = init_sequence(cfg, &mut Rng::new(seed).derive(STREAM_INIT))?;
    let targets: Vec<Vec<usize>> = train.iter().map(|s| s.target.clone()).collect();
    let hp = CtcLoop {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        grad_clip: cfg.grad_clip,
        seed,
    };
    let history = run_ctc_loop(
        &mut params,
        &targets,
        hp,
        |_| true,
        |tape, bound, i| {
            let x = tape.constant(train[i].features.clone());
            sequence_logits(tape, bound, cfg, x)
        },
        |p| {
            if heldout.is_empty() {
                Ok(None)
            } else {
                evaluate_sequence(p, cfg, heldout).map(Some)
            }
        },
    )?;
    Ok(SequenceTrainOutput { params, history })
}

/// `epoch,mean_ctc_loss,heldout_Te` CSV; a missing held-out rate is empty.
pub fn history_csv(history: &[SequenceEpoch]) -> String {
    let mut out = String::from("epoch,mean_ctc_loss,heldout_Te\n");
    for h in history {
        let te = h.heldout_te.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{te}\n", h.epoch, h.mean_ctc_loss));
    }
    out
}
