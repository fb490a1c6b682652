//! Greedy CTC decoding and word error rate measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::vocab;

/// A canonical transcript: uppercase words over A-Z plus apostrophe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    words: Vec<String>,
}

impl Transcript {
    /// Canonicalizes free text (upper-case, strip punctuation except
    /// apostrophes) and splits into words.
    pub fn from_text(text: &str) -> Self {
        let canon = vocab::canonicalize(text);
        Transcript {
            words: canon.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect(),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Class indices of the canonical text, spaces included.
    pub fn to_classes(&self) -> Vec<usize> {
        vocab::encode(&self.text()).expect("canonical text always encodes")
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// Word-level edit distance decomposition against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerReport {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Per-frame argmax (ties to the lowest class index), collapse consecutive
/// repeats, drop blanks, map classes back to text.
pub fn greedy_ctc_decode(logits: &Matrix, blank_index: usize) -> Transcript {
    let mut chars = String::new();
    let mut prev = usize::MAX;
    for i in 0..logits.rows() {
        let k = logits.row_argmax(i);
        if k != prev && k != blank_index {
            if let Some(c) = vocab::class_to_char(k) {
                chars.push(c);
            }
        }
        prev = k;
    }
    Transcript::from_text(&chars)
}

/// Minimal word-level edit distance with an S/D/I backtrace. Cost ties are
/// broken substitution > deletion > insertion.
pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::Data("wer: empty reference transcript".into()));
    }
    let r = reference.words();
    let h = hypothesis.words();
    let n = r.len();
    let m = h.len();

    // d[i][j] = edit distance between r[..i] and h[..j].
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut dels, mut inss) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                subs += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            inss += 1;
            j -= 1;
        }
    }

    Ok(WerReport {
        substitutions: subs,
        deletions: dels,
        insertions: inss,
        ref_words: n,
        wer: (subs + dels + inss) as f64 / n as f64,
    })
}

/// Relative WER reduction from an unadapted baseline, as a fraction.
pub fn werr(baseline_wer: f64, adapted_wer: f64) -> Result<f64> {
    if baseline_wer <= 0.0 {
        return Err(Error::Data(format!(
            "werr: baseline WER must be positive, got {baseline_wer}"
        )));
    }
    Ok((baseline_wer - adapted_wer) / baseline_wer)
}

/// Corpus-level WER: total errors over total reference words.
pub fn corpus_wer(reports: &[WerReport]) -> f64 {
    let edits: usize = reports.iter().map(WerReport::edits).sum();
    let words: usize = reports.iter().map(|r| r.ref_words).sum();
    if words == 0 {
        0.0
    } else {
        edits as f64 / words as f64
    }
}
