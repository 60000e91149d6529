//! Multi-head self-attention and the pre-norm self-attention stack.

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{ensure, invalid, Result};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

/// Projection weights of one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Attention output plus the `[T, T]` weight matrix of every head.
#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

fn fetch(bound: &Bound, name: String) -> Result<Var> {
    bound.get(&name).ok_or_else(|| invalid!("missing attention parameter {name}"))
}

impl MhaWeights {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: fetch(bound, format!("{prefix}wq"))?,
            wk: fetch(bound, format!("{prefix}wk"))?,
            wv: fetch(bound, format!("{prefix}wv"))?,
            wo: fetch(bound, format!("{prefix}wo"))?,
            bo: fetch(bound, format!("{prefix}bo"))?,
        })
    }
}

/// Names of the parameters whose zeroing turns every block into the identity.
pub fn san_output_projection_names(prefix: &str, layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|j| ["wo", "bo", "ff2.w", "ff2.b"].map(|n| format!("{prefix}san{j}.{n}")))
        .collect()
}

pub fn init_san(params: &mut ParamStore, prefix: &str, d_model: usize, layers: usize, rng: &mut Rng) {
    let d = d_model;
    let f = FFN_MULT * d;
    for j in 0..layers {
        let name = |n: &str| format!("{prefix}san{j}.{n}");
        for ln in ["ln1", "ln2"] {
            params.init_const(&name(&format!("{ln}.g")), &[d], 1.0);
            params.init_const(&name(&format!("{ln}.b")), &[d], 0.0);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            params.init_glorot(&name(w), &[d, d], d, d, rng);
        }
        params.init_const(&name("bo"), &[d], 0.0);
        params.init_he(&name("ff1.w"), &[d, f], d, rng);
        params.init_const(&name("ff1.b"), &[f], 0.0);
        params.init_glorot(&name("ff2.w"), &[f, d], f, d, rng);
        params.init_const(&name("ff2.b"), &[d], 0.0);
    }
}

/// Unmasked multi-head attention over `x[T, d_model]`.
pub fn mha(tape: &mut Tape, x: Var, w: &MhaWeights, heads: usize) -> Result<MhaOutput> {
    let d = match tape.shape(x) {
        [_, d] => *d,
        s => return Err(invalid!("mha expects [T, d_model], got {s:?}")),
    };
    ensure!(heads >= 1 && d % heads == 0, "d_model {d} is not divisible by {heads} heads");
    let dh = d / heads;
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.matmul(cat, w.wo)?;
    let out = tape.add_row(proj, w.bo)?;
    Ok(MhaOutput { out, weights })
}

/// One pre-norm block: `x + mha(LN x)` then `x + FFN(LN x)`.
pub fn san_block(tape: &mut Tape, x: Var, bound: &Bound, block_prefix: &str, heads: usize) -> Result<(Var, Vec<Var>)> {
    let p = |n: &str| fetch(bound, format!("{block_prefix}{n}"));
    let ln1 = tape.layer_norm_rows(x, p("ln1.g")?, p("ln1.b")?, LAYER_NORM_EPS)?;
    let att = mha(tape, ln1, &MhaWeights::from_bound(bound, block_prefix)?, heads)?;
    let x = tape.add(x, att.out)?;
    let ln2 = tape.layer_norm_rows(x, p("ln2.g")?, p("ln2.b")?, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(ln2, p("ff1.w")?)?;
    let hidden = tape.add_row(hidden, p("ff1.b")?)?;
    let hidden = tape.relu(hidden);
    let ff = tape.matmul(hidden, p("ff2.w")?)?;
    let ff = tape.add_row(ff, p("ff2.b")?)?;
    Ok((tape.add(x, ff)?, att.weights))
}

/// Stack of `layers` blocks; `layers == 0` is the identity.
pub fn san_forward(tape: &mut Tape, s_p: Var, bound: &Bound, prefix: &str, layers: usize, heads: usize) -> Result<Var> {
    Ok(san_forward_with_weights(tape, s_p, bound, prefix, layers, heads)?.0)
}

/// [`san_forward`] also returning the attention weights, per block then head.
pub fn san_forward_with_weights(
    tape: &mut Tape,
    s_p: Var,
    bound: &Bound,
    prefix: &str,
    layers: usize,
    heads: usize,
) -> Result<(Var, Vec<Vec<Var>>)> {
    ensure!(tape.shape(s_p).len() == 2, "san_forward expects [T, d_model], got {:?}", tape.shape(s_p));
    let mut x = s_p;
    let mut all = Vec::with_capacity(layers);
    for j in 0..layers {
        let (y, w) = san_block(tape, x, bound, &format!("{prefix}san{j}."), heads)?;
        x = y;
        all.push(w);
    }
    Ok((x, all))
}
