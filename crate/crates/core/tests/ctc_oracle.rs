//! Brute-force oracle for the CTC loss: enumerate every frame-level
//! alignment, collapse it (drop repeats, then blanks), and sum the path
//! scores of the alignments that collapse to the target. The dynamic-program
//! loss must equal -ln of that sum for every small instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use suta_core::losses::ctc_loss;
use suta_core::matrix::Matrix;

const BLANK: usize = 0;

/// CTC collapse: merge adjacent repeats, then remove blanks.
fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &a in alignment {
        if a != prev && a != BLANK {
            out.push(a);
        }
        prev = a;
    }
    out
}

/// ln sum over all alignments collapsing to `target` of exp(sum of scores).
fn brute_force_log_prob(log_probs: &Matrix, target: &[usize]) -> Option<f64> {
    let frames = log_probs.rows();
    let classes = log_probs.cols();
    let mut total: Option<f64> = None;
    let mut alignment = vec![0usize; frames];
    loop {
        if collapse(&alignment) == target {
            let score: f64 = alignment
                .iter()
                .enumerate()
                .map(|(t, &a)| log_probs.get(t, a))
                .sum();
            total = Some(match total {
                None => score,
                Some(acc) => {
                    let m = acc.max(score);
                    m + ((acc - m).exp() + (score - m).exp()).ln()
                }
            });
        }
        // Odometer over {0..classes-1}^frames.
        let mut pos = 0;
        loop {
            if pos == frames {
                return total;
            }
            alignment[pos] += 1;
            if alignment[pos] < classes {
                break;
            }
            alignment[pos] = 0;
            pos += 1;
        }
    }
}

/// Every target over non-blank classes with length <= max_len.
fn all_targets(classes: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for c in 1..classes {
                let mut ext: Vec<usize> = t.clone();
                ext.push(c);
                next.push(ext);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn loss_matches_alignment_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    for classes in 2..=4usize {
        for frames in 1..=4usize {
            let log_probs = Matrix::from_fn(frames, classes, |_, _| {
                rng.sample::<f64, _>(StandardNormal) - 0.5
            });
            for target in all_targets(classes, 2) {
                let brute = brute_force_log_prob(&log_probs, &target);
                let dp = ctc_loss(&log_probs, &target, BLANK);
                match brute {
                    Some(lp) => {
                        let loss = dp.unwrap_or_else(|e| {
                            panic!("feasible target {target:?} (L={frames}, C={classes}) rejected: {e}")
                        });
                        assert!(
                            (loss + lp).abs() < 1e-9,
                            "target {target:?}, L={frames}, C={classes}: dp {loss} vs brute {}",
                            -lp
                        );
                        checked += 1;
                    }
                    None => {
                        // Infeasible: empty target still scores the all-blank
                        // path, so only non-empty targets can be rejected.
                        assert!(
                            dp.is_err(),
                            "infeasible target {target:?} (L={frames}, C={classes}) accepted"
                        );
                    }
                }
            }
        }
    }
    assert!(checked > 50, "oracle exercised too few feasible instances ({checked})");
}

#[test]
fn loss_with_normalized_rows_is_a_probability() {
    // With row-stochastic probabilities the total mass over all collapse
    // classes is 1, so any single target's probability is in (0, 1] and the
    // loss is non-negative.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let frames = rng.gen_range(2..=4);
        let classes = rng.gen_range(2..=4);
        let logits = Matrix::from_fn(frames, classes, |_, _| rng.sample(StandardNormal));
        let log_probs = Matrix::from_fn(frames, classes, |i, j| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            logits.get(i, j) - m - z.ln()
        });
        let target = vec![rng.gen_range(1..classes)];
        let loss = ctc_loss(&log_probs, &target, BLANK).unwrap();
        assert!(loss >= -1e-12, "negative CTC loss {loss} for normalized rows");
    }
}

#[test]
fn repeated_labels_need_separating_blanks() {
    // "AA" over 2 frames has no valid alignment (needs A, blank, A).
    let lp = Matrix::filled(2, 3, (1.0f64 / 3.0).ln());
    assert!(ctc_loss(&lp, &[1, 1], BLANK).is_err());
    // Three frames: exactly one alignment A _ A.
    let lp = Matrix::filled(3, 3, (1.0f64 / 3.0).ln());
    let loss = ctc_loss(&lp, &[1, 1], BLANK).unwrap();
    let expected = -(3.0f64.powi(-3)).ln();
    assert!((loss - expected).abs() < 1e-12);
}
