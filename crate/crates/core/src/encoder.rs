//! Residual convolutional encoder `h = f(x)` and projection head `z = g(h)`.
//!
//! The encoder is a reduced pre-activation ResNet: a 3×3 stem, then one or
//! more stages of residual blocks. Every stage entry halves the resolution
//! through a strided 3×3 convolution and a 1×1 projection shortcut. Batch
//! normalization is replaced by a learnable per-channel scale and shift, so
//! the forward pass is a deterministic function of a single image. The
//! representation is the global average of the final activation map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::rng::Rng;

pub const ENCODER_PREFIX: &str = "enc.";
pub const PROJECTION_PREFIX: &str = "proj.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `(H, W)` of the RGB input.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Length of `h`; equals the last entry of `block_channels`.
    pub feature_dim: usize,
    /// Length of `z`.
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            stem_channels: 16,
            block_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            feature_dim: 128,
            projection_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// ResNet18-like widths and depth.
    pub fn resnet18_like(input_size: (usize, usize)) -> Self {
        Self {
            input_size,
            stem_channels: 64,
            block_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            feature_dim: 512,
            projection_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_size.0 > 0 && self.input_size.1 > 0,
            "encoder input size must be positive"
        );
        ensure!(self.stem_channels > 0, "stem_channels must be positive");
        ensure!(!self.block_channels.is_empty(), "block_channels must not be empty");
        ensure!(
            self.block_channels.iter().all(|&c| c > 0),
            "block channel counts must be positive"
        );
        ensure!(self.blocks_per_stage > 0, "blocks_per_stage must be positive");
        ensure!(
            self.feature_dim == *self.block_channels.last().unwrap(),
            "feature_dim {} must equal the final stage width {}",
            self.feature_dim,
            self.block_channels.last().unwrap()
        );
        ensure!(self.projection_dim > 0, "projection_dim must be positive");
        Ok(())
    }
}

fn block_name(stage: usize, block: usize, part: &str) -> String {
    format!("{ENCODER_PREFIX}s{stage}.b{block}.{part}")
}

/// Fresh encoder parameters: He-normal convolutions, unit scales, zero shifts.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    p.init_he("enc.stem.w", &[cfg.stem_channels, 3, 3, 3], 27, rng);
    let mut cin = cfg.stem_channels;
    for (s, &c) in cfg.block_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let inp = if b == 0 { cin } else { c };
            p.init_const(&block_name(s, b, "norm1.scale"), &[inp], 1.0);
            p.init_const(&block_name(s, b, "norm1.shift"), &[inp], 0.0);
            p.init_he(&block_name(s, b, "conv1.w"), &[c, inp, 3, 3], inp * 9, rng);
            p.init_const(&block_name(s, b, "norm2.scale"), &[c], 1.0);
            p.init_const(&block_name(s, b, "norm2.shift"), &[c], 0.0);
            p.init_he(&block_name(s, b, "conv2.w"), &[c, c, 3, 3], c * 9, rng);
            if b == 0 {
                p.init_he(&block_name(s, b, "short.w"), &[c, inp, 1, 1], inp, rng);
            }
        }
        cin = c;
    }
    p.init_const("enc.final.scale", &[cfg.feature_dim], 1.0);
    p.init_const("enc.final.shift", &[cfg.feature_dim], 0.0);
    Ok(p)
}

/// Projection head weights `W1[D,D]`, `W2[D,d_z]`, no biases.
pub fn init_projection(cfg: &EncoderConfig, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let (d, dz) = (cfg.feature_dim, cfg.projection_dim);
    p.init_he("proj.w1", &[d, d], d, rng);
    p.init_glorot("proj.w2", &[d, dz], d, dz, rng);
    p
}

/// `h = f(x)` for one `[3,H,W]` image; returns a `[D]` vector.
pub fn encode(tape: &mut Tape, params: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let (h, w) = cfg.input_size;
    ensure!(
        tape.shape(x) == [3, h, w],
        "encoder expects a [3,{h},{w}] image, got {:?}",
        tape.shape(x)
    );
    let mut x = tape.conv2d(x, params["enc.stem.w"], 1, 1)?;
    for s in 0..cfg.block_channels.len() {
        for b in 0..cfg.blocks_per_stage {
            let p = |part: &str| params[block_name(s, b, part).as_str()];
            let stride = if b == 0 { 2 } else { 1 };
            let pre = tape.channel_affine(x, p("norm1.scale"), p("norm1.shift"))?;
            let pre = tape.relu(pre);
            let shortcut = if b == 0 {
                tape.conv2d(pre, p("short.w"), 2, 0)?
            } else {
                x
            };
            let r = tape.conv2d(pre, p("conv1.w"), stride, 1)?;
            let r = tape.channel_affine(r, p("norm2.scale"), p("norm2.shift"))?;
            let r = tape.relu(r);
            let r = tape.conv2d(r, p("conv2.w"), 1, 1)?;
            x = tape.add(shortcut, r)?;
        }
    }
    let x = tape.channel_affine(x, params["enc.final.scale"], params["enc.final.shift"])?;
    let x = tape.relu(x);
    tape.global_avg_pool(x)
}

/// `z = W2ᵀ·relu(W1ᵀ·h)`, treating `h` as a row vector. Accepts `[D]` or `[m,D]`.
pub fn project(tape: &mut Tape, params: &Bound, h: Var) -> Result<Var> {
    let d = tape.value(params["proj.w1"]).shape()[0];
    let rows = match tape.shape(h) {
        [n] if *n == d => 1,
        [m, n] if *n == d => *m,
        s => return Err(crate::error::invalid!("projection expects features of width {d}, got {s:?}")),
    };
    let h2 = tape.reshape(h, &[rows, d])?;
    let a = tape.matmul(h2, params["proj.w1"])?;
    let a = tape.relu(a);
    tape.matmul(a, params["proj.w2"])
}

/// Inference-only `h = f(x)`.
pub fn encode_image(params: &ParamStore, cfg: &EncoderConfig, img: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(img.clone());
    let h = encode(&mut tape, &bound, cfg, x)?;
    Ok(tape.value(h).clone())
}
