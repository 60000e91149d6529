//! Connectionist temporal classification: log-space forward-backward loss and
//! best-path decoding. Blank is a parameter; the rest of the crate uses 0.

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{ensure, invalid, Result};

/// Minimum number of frames needed to emit `target`: one per label plus one
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_target(target: &[usize], frames: usize, vocab: usize, blank: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&l| l >= vocab || l == blank) {
        return Err(invalid!(
            "CTC label {bad} out of range (vocabulary {vocab}, blank {blank})"
        ));
    }
    let need = min_frames(target);
    ensure!(
        need <= frames,
        "CTC target of length {} needs at least {need} frames, got {frames}",
        target.len()
    );
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `−log p(target | softmax_rows(logits))` and its gradient with respect to
/// `logits[T, V]` (row-major).
pub fn ctc_loss_and_grad(
    logits: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    ensure!(frames >= 1, "CTC needs at least one frame");
    ensure!(logits.len() == frames * vocab, "CTC logits do not match [T, V]");
    check_target(target, frames, vocab, blank)?;

    let mut logp = logits.to_vec();
    for row in logp.chunks_mut(vocab) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == neg { neg } else { acc + logp[t * vocab + ext[s]] };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    ensure!(log_p.is_finite(), "CTC target has zero probability under the given logits");

    // beta[t][s]: log-probability of completing the target from state s at t,
    // excluding the emission at t.
    let mut beta = vec![neg; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + logp[(t + 1) * vocab + ext[s2]];
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        let row = &mut grad[t * vocab..(t + 1) * vocab];
        for (k, g) in row.iter_mut().enumerate() {
            *g = logp[t * vocab + k].exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            row[ext[s]] -= (a + b - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of `logits[T, V]` recorded on the tape.
pub fn ctc_loss(tape: &mut Tape, logits: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (t, v) = match tape.shape(logits) {
        [t, v] => (*t, *v),
        s => return Err(invalid!("CTC expects [T, V] logits, got {s:?}")),
    };
    let (loss, grad) = ctc_loss_and_grad(tape.data(logits), t, v, target, blank)?;
    Ok(tape.fused_loss(logits, loss, grad))
}

/// Best-path decoding: per-frame argmax (ties to the lower index), collapse
/// repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &[f64], vocab: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks(vocab) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
