//! Property tests for the algebraic invariants of the loss stack, decoding,
//! and scoring.

use proptest::prelude::*;

use suta_core::eval::{greedy_ctc_decode, wer, Transcript};
use suta_core::losses::{blank_mask, entropy_loss, mcc_loss, softmax_temperature};
use suta_core::matrix::Matrix;
use suta_core::vocab;

fn logits_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-8.0..8.0f64, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(logits in logits_strategy(6, 8), t in 0.2..5.0f64) {
        let p = softmax_temperature(&logits, t).unwrap();
        for i in 0..p.frames() {
            let row_sum: f64 = p.values().row(i).iter().sum();
            prop_assert!((row_sum - 1.0).abs() < 1e-9);
            prop_assert!(p.values().row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn temperature_preserves_argmax(logits in logits_strategy(6, 8), t in 0.2..5.0f64) {
        // Smoothing rescales logit gaps by 1/T; the ordering is unchanged.
        let p1 = softmax_temperature(&logits, 1.0).unwrap();
        let pt = softmax_temperature(&logits, t).unwrap();
        for i in 0..logits.rows() {
            prop_assert_eq!(p1.values().row_argmax(i), pt.values().row_argmax(i));
        }
    }

    #[test]
    fn entropy_bounded_by_ln_classes(logits in logits_strategy(6, 8), t in 0.2..5.0f64) {
        let p = softmax_temperature(&logits, t).unwrap();
        let mask = blank_mask(&p, 0).unwrap();
        let h = entropy_loss(&p, &mask).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (logits.cols() as f64).ln() + 1e-9);
    }

    #[test]
    fn mcc_complements_frobenius_norm(logits in logits_strategy(6, 8), t in 0.2..5.0f64) {
        // Sum of all Gram entries is ||P 1||^2 = frame count, so the
        // off-diagonal part must equal frames - ||P||_F^2.
        let p = softmax_temperature(&logits, t).unwrap();
        let frob2: f64 = p.values().data().iter().map(|x| x * x).sum();
        let frames = p.frames() as f64;
        prop_assert!((mcc_loss(&p) + frob2 - frames).abs() < 1e-9);
        prop_assert!(mcc_loss(&p) >= -1e-12);
    }

    #[test]
    fn decode_is_blank_free_and_collapsed(classes in proptest::collection::vec(0..vocab::VOCAB_SIZE, 1..30)) {
        // One-hot logits reproduce the class sequence exactly, so decoding
        // equals collapsing it by hand.
        let logits = Matrix::from_fn(classes.len(), vocab::VOCAB_SIZE, |i, j| {
            if j == classes[i] { 5.0 } else { 0.0 }
        });
        let decoded = greedy_ctc_decode(&logits, vocab::BLANK);
        let mut expected = String::new();
        let mut prev = usize::MAX;
        for &c in &classes {
            if c != prev && c != vocab::BLANK {
                expected.push(vocab::class_to_char(c).unwrap());
            }
            prev = c;
        }
        prop_assert_eq!(decoded, Transcript::from_text(&expected));
    }

    #[test]
    fn wer_matches_brute_force_edit_distance(
        reference in proptest::collection::vec("[a-c]{1,2}", 1..=6),
        hypothesis in proptest::collection::vec("[a-c]{1,2}", 0..=6),
    ) {
        let r = Transcript::from_text(&reference.join(" "));
        let h = Transcript::from_text(&hypothesis.join(" "));
        let report = wer(&r, &h).unwrap();
        let errors = report.substitutions + report.deletions + report.insertions;
        prop_assert_eq!(errors, edit_distance(r.words(), h.words()));
        prop_assert_eq!(report.ref_words, r.words().len());
        prop_assert!((report.wer - errors as f64 / r.words().len() as f64).abs() < 1e-12);
    }

    #[test]
    fn wer_is_zero_iff_equal(words in proptest::collection::vec("[a-c]{1,2}", 1..=5)) {
        let t = Transcript::from_text(&words.join(" "));
        let report = wer(&t, &t).unwrap();
        prop_assert_eq!(report.substitutions + report.deletions + report.insertions, 0);
        prop_assert_eq!(report.wer, 0.0);
    }
}

/// Plain Levenshtein distance over words, independent of the production DP
/// (no backtrace, different recursion shape).
fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur.push(sub.min(prev[j] + 1).min(cur[j - 1] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}
