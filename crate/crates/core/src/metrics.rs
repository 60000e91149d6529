//! Classification accuracy, edit-operation counts, phone error and correct rates.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `n_correct / n_total`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(!labels.is_empty(), "accuracy of an empty prediction set");
    ensure!(
        preds.len() == labels.len(),
        "accuracy: {} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Square confusion matrix, rows indexed by true class.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p < classes && l < classes {
            m[l][p] += 1;
        }
    }
    m
}

/// Insertions, deletions and substitutions of one minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// When several minimal alignments exist the backtrace prefers a diagonal
/// step (match or substitution), then a deletion, then an insertion.
pub fn edit_ops<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Phone error rate and its complement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub te: f64,
    pub tc: f64,
}

impl ErrorRates {
    pub fn from_te(te: f64) -> Self {
        Self { te, tc: 1.0 - te }
    }
}

/// Corpus-level (micro-averaged) `T_e = Σ(n_i+n_d+n_s) / ΣN` and `T_c = 1 − T_e`.
///
/// `T_e` is unbounded above when insertions dominate.
pub fn phone_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<ErrorRates> {
    let counts: Vec<EditCounts> = pairs.iter().map(|(r, h)| edit_ops(r, h)).collect();
    micro_rates(&counts)
}

pub fn micro_rates(counts: &[EditCounts]) -> Result<ErrorRates> {
    let total: usize = counts.iter().map(|c| c.reference_len).sum();
    ensure!(total > 0, "phone error rate with zero total reference length");
    let errors: usize = counts.iter().map(EditCounts::errors).sum();
    Ok(ErrorRates::from_te(errors as f64 / total as f64))
}

/// Per-sentence (macro) average of `T_e`; sentences with empty references are skipped.
pub fn macro_rates(counts: &[EditCounts]) -> Result<ErrorRates> {
    let rates: Vec<f64> = counts
        .iter()
        .filter(|c| c.reference_len > 0)
        .map(|c| c.errors() as f64 / c.reference_len as f64)
        .collect();
    ensure!(!rates.is_empty(), "macro phone error rate with no non-empty references");
    Ok(ErrorRates::from_te(rates.iter().sum::<f64>() / rates.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub task: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    #[serde(flatten)]
    pub counts: EditCounts,
    pub te: f64,
    pub tc: f64,
}

impl SampleMetrics {
    pub fn new(id: impl Into<String>, task: impl Into<String>, reference: Vec<usize>, hypothesis: Vec<usize>) -> Self {
        let counts = edit_ops(&reference, &hypothesis);
        let te = if counts.reference_len > 0 {
            counts.errors() as f64 / counts.reference_len as f64
        } else {
            counts.errors() as f64
        };
        Self {
            id: id.into(),
            task: task.into(),
            reference,
            hypothesis,
            counts,
            te,
            tc: 1.0 - te,
        }
    }
}

/// Aggregate sequence metrics for one task (for example hand shapes or phonemes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub task: String,
    pub sentences: usize,
    pub micro: ErrorRates,
    pub macro_avg: ErrorRates,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub reference_len: usize,
}

impl SequenceSummary {
    pub fn from_samples(task: &str, samples: &[SampleMetrics]) -> Result<Self> {
        let counts: Vec<EditCounts> = samples
            .iter()
            .filter(|s| s.task == task)
            .map(|s| s.counts)
            .collect();
        Ok(Self {
            task: task.to_string(),
            sentences: counts.len(),
            micro: micro_rates(&counts)?,
            macro_avg: macro_rates(&counts)?,
            insertions: counts.iter().map(|c| c.insertions).sum(),
            deletions: counts.iter().map(|c| c.deletions).sum(),
            substitutions: counts.iter().map(|c| c.substitutions).sum(),
            reference_len: counts.iter().map(|c| c.reference_len).sum(),
        })
    }
}

/// Static classification results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub task: String,
    pub accuracy: f64,
    pub total: usize,
    pub confusion: Vec<Vec<u64>>,
}

impl ClassificationSummary {
    pub fn new(task: &str, preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        Ok(Self {
            task: task.to_string(),
            accuracy: accuracy(preds, labels)?,
            total: labels.len(),
            confusion: confusion_matrix(preds, labels, classes),
        })
    }
}

/// Everything an evaluation run produces, plus the resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: serde_json::Value,
    pub classification: Vec<ClassificationSummary>,
    pub sequences: Vec<SequenceSummary>,
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            classification: Vec::new(),
            sequences: Vec::new(),
            samples: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per sample.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("id,task,ref_len,n_i,n_d,n_s,te,tc\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.id,
                s.task,
                s.counts.reference_len,
                s.counts.insertions,
                s.counts.deletions,
                s.counts.substitutions,
                s.te,
                s.tc
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("samples.csv");
        std::fs::write(&csv, self.samples_csv()).map_err(|e| Error::io(&csv, e))
    }
}
