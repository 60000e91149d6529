//! Independent reference implementations and the property sweeps built on them.

use cuedseq::autodiff::{Tape, Tensor};
use cuedseq::contrastive::nt_xent_loss;
use cuedseq::metrics::{edit_ops, phone_error_rate};
use cuedseq::rng::Rng;
use cuedseq::sequence::{check_target, ctc_loss_and_grad, BLANK};

use super::random_tensor;

/// NT-Xent evaluated literally: cosine similarities, exponentials and the
/// ratio for every ordered positive pair, averaged over `2N` rows.
pub fn nt_xent_direct(z: &Tensor, temperature: f64) -> f64 {
    let m = z.shape()[0];
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..m {
        let j = i ^ 1;
        let num = (cos(z.row(i), z.row(j)) / temperature).exp();
        let den: f64 = (0..m).filter(|&k| k != i).map(|k| (cos(z.row(i), z.row(k)) / temperature).exp()).sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

pub fn nt_xent_of(z: &Tensor, temperature: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let l = nt_xent_loss(&mut tape, v, temperature).unwrap();
    tape.value(l).item()
}

/// NT-Xent against the direct evaluation for N ∈ {1..4}, d ∈ {2,4,8}, 50
/// draws each; N = 1 must give exactly zero; rescaling rows must not matter.
pub fn nt_xent_sweep() -> Vec<String> {
    let mut failures = Vec::new();
    let mut rng = Rng::new(2024);
    for n in 1..=4 {
        for d in [2, 4, 8] {
            for draw in 0..50 {
                let z = random_tensor(&[2 * n, d], &mut rng, 1.0);
                let t = [0.1, 0.5, 1.0][draw % 3];
                let got = nt_xent_of(&z, t);
                let want = nt_xent_direct(&z, t);
                if !((got - want).abs() < 1e-10) {
                    failures.push(format!("N={n} d={d} draw {draw}: {got} vs {want}"));
                }
                if n == 1 && got != 0.0 {
                    failures.push(format!("N=1 d={d} draw {draw}: loss {got} is not 0"));
                }
                let mut scaled = z.clone();
                for r in 0..2 * n {
                    let s = rng.uniform(0.1, 10.0);
                    for v in &mut scaled.data_mut()[r * d..(r + 1) * d] {
                        *v *= s;
                    }
                }
                let rescaled = nt_xent_of(&scaled, t);
                if !((rescaled - got).abs() < 1e-10) {
                    failures.push(format!("N={n} d={d} draw {draw}: rescaled {rescaled} vs {got}"));
                }
            }
        }
    }
    failures
}

/// Collapse repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `−ln Σ_paths Π_t softmax(logits_t)[path_t]` over all `V^T` paths whose
/// collapse equals `target`.
pub fn ctc_brute_force(logits: &[f64], frames: usize, vocab: usize, target: &[usize]) -> f64 {
    let probs: Vec<f64> = logits
        .chunks(vocab)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    let count = vocab.pow(frames as u32);
    for code in 0..count {
        let mut c = code;
        let mut p = 1.0;
        for (t, slot) in path.iter_mut().enumerate() {
            *slot = c % vocab;
            c /= vocab;
            p *= probs[t * vocab + *slot];
        }
        if collapse(&path) == target {
            total += p;
        }
    }
    -total.ln()
}

/// 200 random instances with T ≤ 8, V ≤ 4, L ≤ 4 against enumeration.
pub fn ctc_sweep() -> Vec<String> {
    let mut failures = Vec::new();
    let mut rng = Rng::new(77);
    let mut done = 0;
    while done < 200 {
        let frames = 1 + rng.index(8);
        let vocab = 2 + rng.index(3);
        let len = rng.index(5);
        let target: Vec<usize> = (0..len).map(|_| 1 + rng.index(vocab - 1)).collect();
        if check_target(&target, frames, vocab, BLANK).is_err() {
            continue;
        }
        let logits: Vec<f64> = (0..frames * vocab).map(|_| 2.0 * rng.normal()).collect();
        let (got, _) = ctc_loss_and_grad(&logits, frames, vocab, &target, BLANK).unwrap();
        let want = ctc_brute_force(&logits, frames, vocab, &target);
        if !((got - want).abs() < 1e-8) {
            failures.push(format!("T={frames} V={vocab} target {target:?}: {got} vs {want}"));
        }
        done += 1;
    }
    let (l1, _) = ctc_loss_and_grad(&[0.0, 0.0], 1, 2, &[1], BLANK).unwrap();
    if !((l1 - 2f64.ln()).abs() < 1e-12) {
        failures.push(format!("T=1 hand case: {l1}"));
    }
    let (l2, _) = ctc_loss_and_grad(&[0.0; 4], 2, 2, &[1], BLANK).unwrap();
    if !((l2 + 0.75f64.ln()).abs() < 1e-12) {
        failures.push(format!("T=2 hand case: {l2}"));
    }
    let rejected = [
        (vec![1, 1], 2, 2),
        (vec![1, 2, 3], 2, 4),
        (vec![4], 3, 4),
        (vec![0], 3, 4),
    ];
    for (target, frames, vocab) in rejected {
        if ctc_loss_and_grad(&vec![0.0; frames * vocab], frames, vocab, &target, BLANK).is_ok() {
            failures.push(format!("accepted invalid target {target:?} for T={frames} V={vocab}"));
        }
    }
    failures
}

/// Textbook recursive Levenshtein distance, memoized on suffix positions.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut [Option<usize>], w: usize) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let key = a.len() * w + b.len();
        if let Some(v) = memo[key] {
            return v;
        }
        let v = (go(&a[1..], b, memo, w) + 1)
            .min(go(a, &b[1..], memo, w) + 1)
            .min(go(&a[1..], &b[1..], memo, w) + usize::from(a[0] != b[0]));
        memo[key] = Some(v);
        v
    }
    let w = b.len() + 1;
    let mut memo = vec![None; (a.len() + 1) * w];
    go(a, b, &mut memo, w)
}

/// Every sequence over `symbols` of length at most `max_len`.
pub fn all_sequences(max_len: usize, symbols: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..symbols {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Exhaustive edit-distance comparison over all pairs of sequences of length
/// ≤ 6 on 4 symbols, plus the rate identities.
pub fn metric_sweep() -> Vec<String> {
    let mut failures = Vec::new();
    let seqs = all_sequences(6, 4);
    for a in &seqs {
        for b in &seqs {
            let c = edit_ops(a, b);
            let want = levenshtein(a, b);
            if c.errors() != want
                || c.reference_len != a.len()
                || a.len() + c.insertions != b.len() + c.deletions
            {
                failures.push(format!("{a:?} vs {b:?}: {c:?}, distance {want}"));
                if failures.len() > 10 {
                    return failures;
                }
            }
        }
    }
    let mut rng = Rng::new(5);
    let mut pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..40)
        .map(|_| (seqs[rng.index(seqs.len())].clone(), seqs[rng.index(seqs.len())].clone()))
        .filter(|(r, _)| !r.is_empty())
        .collect();
    let base = phone_error_rate(&pairs).unwrap();
    if base.tc != 1.0 - base.te {
        failures.push(format!("Tc {} != 1 - Te {}", base.tc, base.te));
    }
    for k in 0..100 {
        rng.shuffle(&mut pairs);
        let r = phone_error_rate(&pairs).unwrap();
        if r != base {
            failures.push(format!("shuffle {k}: {r:?} vs {base:?}"));
        }
        if r.tc != 1.0 - r.te {
            failures.push(format!("shuffle {k}: Tc != 1 - Te"));
        }
    }
    failures
}
