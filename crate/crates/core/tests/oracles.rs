mod common;

use common::oracles::{collapse, ctc_brute_force, levenshtein, metric_sweep, nt_xent_direct, nt_xent_sweep, ctc_sweep};
use cuedseq::autodiff::Tensor;

#[test]
fn nt_xent_matches_direct_evaluation() {
    let failures = nt_xent_sweep();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn nt_xent_direct_two_pair_case() {
    let z = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], &[4, 2]).unwrap();
    let want = (1.0 + 2.0 / std::f64::consts::E).ln();
    assert!((nt_xent_direct(&z, 1.0) - want).abs() < 1e-12);
}

#[test]
fn ctc_matches_path_enumeration() {
    let failures = ctc_sweep();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn brute_force_oracle_sanity() {
    assert_eq!(collapse(&[0, 1, 1, 0, 2]), vec![1, 2]);
    assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
    assert!(collapse(&[0, 0]).is_empty());
    assert!((ctc_brute_force(&[0.0; 4], 2, 2, &[1]) + 0.75f64.ln()).abs() < 1e-15);
}

#[test]
fn edit_ops_matches_levenshtein_exhaustively() {
    let failures = metric_sweep();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn levenshtein_oracle_sanity() {
    assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    assert_eq!(levenshtein(b"", b"abc"), 3);
    assert_eq!(levenshtein(b"abc", b"abc"), 0);
}
