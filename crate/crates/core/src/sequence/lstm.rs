//! Gated LSTM cell and the stacked bidirectional LSTM.
//!
//! Gate columns are laid out `[i | f | g | o]`, each `H` wide.

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{ensure, invalid, Result};
use crate::rng::Rng;

/// Weights of one direction of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[d_in, 4H]`
    pub wx: Var,
    /// `[H, 4H]`
    pub wh: Var,
    /// `[4H]`
    pub b: Var,
}

impl LstmWeights {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            bound
                .get(&format!("{prefix}.{n}"))
                .ok_or_else(|| invalid!("missing LSTM parameter {prefix}.{n}"))
        };
        Ok(Self { wx: get("wx")?, wh: get("wh")?, b: get("b")? })
    }
}

pub fn lstm_param_name(prefix: &str, layer: usize, backward: bool, what: &str) -> String {
    let dir = if backward { "bw" } else { "fw" };
    format!("{prefix}lstm{layer}.{dir}.{what}")
}

/// Inserts weights for `layers` bidirectional layers under `prefix`.
/// Forget-gate biases start at 1.
pub fn init_bilstm(params: &mut ParamStore, prefix: &str, d_in: usize, d_model: usize, layers: usize, rng: &mut Rng) {
    let h = d_model / 2;
    for l in 0..layers {
        let width = if l == 0 { d_in } else { d_model };
        for backward in [false, true] {
            let name = |w: &str| lstm_param_name(prefix, l, backward, w);
            params.init_glorot(&name("wx"), &[width, 4 * h], width, h, rng);
            params.init_glorot(&name("wh"), &[h, 4 * h], h, h, rng);
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            params.insert(name("b"), Tensor::from_vec(b, &[4 * h]).expect("non-empty"));
        }
    }
}

/// Gate nonlinearities and state update from pre-activations `[1, 4H]`.
fn cell(tape: &mut Tape, pre: Var, c_prev: Var, h: usize) -> Result<(Var, Var)> {
    let i = tape.slice_cols(pre, 0, h)?;
    let f = tape.slice_cols(pre, h, h)?;
    let g = tape.slice_cols(pre, 2 * h, h)?;
    let o = tape.slice_cols(pre, 3 * h, h)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_t = tape.mul(o, tc)?;
    Ok((h_t, c))
}

fn hidden_of(tape: &Tape, w: &LstmWeights) -> Result<usize> {
    match tape.shape(w.wh) {
        [h, g] if *g == 4 * *h => Ok(*h),
        s => Err(invalid!("LSTM recurrent weight must be [H, 4H], got {s:?}")),
    }
}

/// One LSTM step on row vectors `x_t[1, d_in]`, `h_prev[1, H]`, `c_prev[1, H]`.
pub fn lstm_step(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let h = hidden_of(tape, w)?;
    ensure!(
        tape.shape(h_prev) == [1, h] && tape.shape(c_prev) == [1, h],
        "LSTM state must be [1, {h}], got {:?} and {:?}",
        tape.shape(h_prev),
        tape.shape(c_prev)
    );
    let xw = tape.matmul(x_t, w.wx)?;
    let hw = tape.matmul(h_prev, w.wh)?;
    let pre = tape.add(xw, hw)?;
    let pre = tape.add_row(pre, w.b)?;
    cell(tape, pre, c_prev, h)
}

/// Runs one direction over the column blocks `parts` (together `[T, d_in]`);
/// returns per-frame hidden states in input order. Splitting the input
/// product per block keeps the mirrored network bitwise symmetric.
fn run_direction(tape: &mut Tape, parts: &[Var], w: &LstmWeights, backward: bool) -> Result<Vec<Var>> {
    let h = hidden_of(tape, w)?;
    let frames = tape.shape(parts[0])[0];
    let mut xw = None;
    let mut offset = 0;
    for &part in parts {
        let width = tape.shape(part)[1];
        let rows = if parts.len() == 1 { w.wx } else { tape.slice_rows(w.wx, offset, width)? };
        offset += width;
        let term = tape.matmul(part, rows)?;
        xw = Some(match xw {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    ensure!(
        offset == tape.shape(w.wx)[0],
        "LSTM input width {offset} does not match weight {:?}",
        tape.shape(w.wx)
    );
    let xw = tape.add_row(xw.expect("at least one part"), w.b)?;
    let mut h_t = tape.constant(Tensor::zeros(&[1, h]));
    let mut c_t = tape.constant(Tensor::zeros(&[1, h]));
    let mut out = vec![h_t; frames];
    let order: Box<dyn Iterator<Item = usize>> =
        if backward { Box::new((0..frames).rev()) } else { Box::new(0..frames) };
    for t in order {
        let xt = tape.slice_rows(xw, t, 1)?;
        let hw = tape.matmul(h_t, w.wh)?;
        let pre = tape.add(xt, hw)?;
        let (hn, cn) = cell(tape, pre, c_t, h)?;
        h_t = hn;
        c_t = cn;
        out[t] = h_t;
    }
    Ok(out)
}

/// Stacked bidirectional LSTM over `x[T, d_in]` → `[T, 2H]`, each frame the
/// concatenation `[forward | backward]`. Layer `l` weights are read from
/// `{prefix}lstm{l}.{fw,bw}.{wx,wh,b}`.
pub fn bilstm_forward(tape: &mut Tape, x: Var, bound: &Bound, prefix: &str, layers: usize) -> Result<Var> {
    let frames = match tape.shape(x) {
        [t, _] => *t,
        s => return Err(invalid!("bilstm_forward expects [T, d_in], got {s:?}")),
    };
    ensure!(frames >= 1, "bilstm_forward needs at least one frame");
    ensure!(layers >= 1, "bilstm_forward needs at least one layer");
    let mut parts = vec![x];
    for l in 0..layers {
        let fw = LstmWeights::from_bound(bound, &format!("{prefix}lstm{l}.fw"))?;
        let bw = LstmWeights::from_bound(bound, &format!("{prefix}lstm{l}.bw"))?;
        let f = run_direction(tape, &parts, &fw, false)?;
        let b = run_direction(tape, &parts, &bw, true)?;
        parts = vec![tape.concat_rows(&f)?, tape.concat_rows(&b)?];
    }
    tape.concat_cols(&parts)
}

/// Copies forward-direction weights onto the backward direction so that the
/// network commutes with time reversal up to swapping output halves. Beyond
/// the first layer the input rows of `wx` are half-swapped to match.
pub fn mirror_bilstm(params: &mut ParamStore, prefix: &str, layers: usize) -> Result<()> {
    for l in 0..layers {
        for what in ["wx", "wh", "b"] {
            let src = params
                .get(&lstm_param_name(prefix, l, false, what))
                .ok_or_else(|| invalid!("missing LSTM layer {l}"))?
                .clone();
            let dst = if l > 0 && what == "wx" { swap_row_halves(&src) } else { src };
            params.insert(lstm_param_name(prefix, l, true, what), dst);
        }
    }
    Ok(())
}

fn swap_row_halves(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let half = rows / 2;
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    out.extend_from_slice(&d[half * cols..]);
    out.extend_from_slice(&d[..half * cols]);
    Tensor::from_vec(out, &[rows, cols]).expect("same shape")
}
