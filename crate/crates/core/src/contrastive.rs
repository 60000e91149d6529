//! Contrastive pretraining with the normalized temperature-scaled
//! cross-entropy (NT-Xent) objective over pairs of augmented views.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augmentation::{make_view_pair, AugmentConfig};
use crate::autodiff::{load_checkpoint, log_sum_exp, AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode, init_encoder, init_projection, project, EncoderConfig, ENCODER_PREFIX, PROJECTION_PREFIX};
use crate::error::{ensure, invalid, Result};
use crate::rng::{mix_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Source images per batch; each contributes two views.
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Initialize from this checkpoint and train for `warm_start_epochs`.
    pub warm_start_checkpoint: Option<PathBuf>,
    pub warm_start_epochs: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            temperature: 0.5,
            epochs: 200,
            lr: 1e-3,
            warm_start_checkpoint: None,
            warm_start_epochs: 100,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, "contrastive batch_size must be at least 2");
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature must be positive"
        );
        ensure!(self.lr > 0.0, "learning rate must be positive");
        Ok(())
    }
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure!(u.len() == v.len(), "cosine_sim: lengths {} and {} differ", u.len(), v.len());
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(nu > 0.0 && nv > 0.0, "cosine_sim of a zero-norm vector");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Index of the positive partner of row `i` under the interleaved layout.
pub fn positive_of(i: usize) -> usize {
    i ^ 1
}

/// Mean over rows of `−log softmax_{k≠i}(logits[i,·])[positive_of(i)]`.
fn contrastive_cross_entropy(tape: &mut Tape, logits: Var) -> Var {
    let m = tape.shape(logits)[0];
    let mut grad = tape.data(logits).to_vec();
    let mut total = 0.0;
    for (i, row) in grad.chunks_mut(m).enumerate() {
        let pos = positive_of(i);
        let others: Vec<f64> = (0..m).filter(|&k| k != i).map(|k| row[k]).collect();
        let lse = log_sum_exp(&others);
        total += lse - row[pos];
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k == i { 0.0 } else { (*v - lse).exp() / m as f64 };
        }
        row[pos] -= 1.0 / m as f64;
    }
    tape.fused_loss(logits, total / m as f64, grad)
}

/// NT-Xent loss of `z[2N, d]` whose rows `2m` and `2m+1` are the two views of
/// sample `m`. Each of the `2N` ordered positive pairs contributes
/// `−log(exp(sim(z_i,z_j)/t) / Σ_{k≠i} exp(sim(z_i,z_k)/t))`; the result is
/// their mean.
pub fn nt_xent_loss(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let rows = match tape.shape(z) {
        [m, _] => *m,
        s => return Err(invalid!("nt_xent_loss expects [2N, d], got {s:?}")),
    };
    ensure!(rows >= 2 && rows % 2 == 0, "nt_xent_loss needs an even number of rows >= 2, got {rows}");
    ensure!(temperature > 0.0, "temperature must be positive");
    let zn = tape.normalize_rows(z)?;
    let sim = tape.matmul_nt(zn, zn)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    Ok(contrastive_cross_entropy(tape, logits))
}

/// Output of [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// Encoder (`enc.*`) and projection head (`proj.*`) parameters.
    pub params: ParamStore,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

const STREAM_INIT: u64 = 0x11;
const STREAM_SHUFFLE: u64 = 0x12;
const STREAM_VIEWS: u64 = 0x13;

pub fn initial_params(enc_cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    let init = Rng::new(seed).derive(STREAM_INIT);
    let mut params = init_encoder(enc_cfg, &mut init.derive(0))?;
    params.merge(&init_projection(enc_cfg, &mut init.derive(1)));
    Ok(params)
}

/// Number of epochs a run performs, honoring the warm-start override.
pub fn effective_epochs(cfg: &ContrastiveConfig) -> usize {
    if cfg.warm_start_checkpoint.is_some() {
        cfg.warm_start_epochs
    } else {
        cfg.epochs
    }
}

/// Contrastive pretraining of encoder and projection head on unlabeled images.
///
/// Each epoch shuffles the images with the run seed, drops the final
/// incomplete batch, expands every batch of `N` sources into `2N` views and
/// takes one Adam step on the NT-Xent loss. The augmentation stream of a view
/// pair depends only on `(seed, epoch, image index)`.
pub fn pretrain(
    images: &[Tensor],
    enc_cfg: &EncoderConfig,
    aug_cfg: &AugmentConfig,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    aug_cfg.validate()?;
    enc_cfg.validate()?;
    ensure!(
        aug_cfg.output_size == enc_cfg.input_size,
        "augmentation output {:?} differs from encoder input {:?}",
        aug_cfg.output_size,
        enc_cfg.input_size
    );
    let n = cfg.batch_size;
    ensure!(
        images.len() >= 2 * n,
        "pretraining needs at least {} images for batch size {n}, got {}",
        2 * n,
        images.len()
    );
    let mut params = initial_params(enc_cfg, seed)?;
    if let Some(path) = &cfg.warm_start_checkpoint {
        let ckpt = load_checkpoint(path)?;
        params.load_matching(&ckpt, ENCODER_PREFIX)?;
        params.load_matching(&ckpt, PROJECTION_PREFIX)?;
    }
    let epochs = effective_epochs(cfg);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = Rng::new(mix_seed(seed, &[STREAM_SHUFFLE, epoch as u64])).permutation(images.len());
        let mut losses = Vec::new();
        for batch in order.chunks_exact(n) {
            let mut views = Vec::with_capacity(2 * n);
            for &idx in batch {
                let rng = Rng::new(mix_seed(seed, &[STREAM_VIEWS, epoch as u64, idx as u64]));
                let (a, b) = make_view_pair(&images[idx], aug_cfg, &rng)?;
                views.push(a);
                views.push(b);
            }
            let mut tape = Tape::new();
            let bound = params.bind_all(&mut tape);
            let mut hs = Vec::with_capacity(views.len());
            for v in views {
                let x = tape.constant(v);
                let h = encode(&mut tape, &bound, enc_cfg, x)?;
                hs.push(tape.reshape(h, &[1, enc_cfg.feature_dim])?);
            }
            let h = tape.concat_rows(&hs)?;
            let z = project(&mut tape, &bound, h)?;
            let loss = nt_xent_loss(&mut tape, z, cfg.temperature)?;
            losses.push(tape.value(loss).item());
            tape.backward(loss)?;
            adam.step(&mut params, &bound.gradients(&tape))?;
        }
        history.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(PretrainOutput { params, history })
}

/// `epoch,mean_loss` CSV.
pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}
