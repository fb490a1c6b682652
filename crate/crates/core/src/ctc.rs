//! Forward-backward recursions for the CTC loss, in log space.
//!
//! The loss node on the graph delegates here: `loss` runs the alpha
//! recursion, `grad_wrt_log_probs` runs both recursions and assembles the
//! gradient of -log p(target) with respect to the per-frame log scores.

use crate::matrix::Matrix;

pub(crate) const NEG_INF: f64 = f64::NEG_INFINITY;

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(NEG_INF, f64::max);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

/// Minimum number of frames needed to emit `target`: one per token plus one
/// separating blank per consecutive repeat.
pub(crate) fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Blank-augmented state sequence: blank, t1, blank, t2, ..., blank.
fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn alpha(log_probs: &Matrix, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut a = vec![vec![NEG_INF; states]; frames];
    a[0][0] = log_probs.get(0, ext[0]);
    if states > 1 {
        a[0][1] = log_probs.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut terms = vec![a[t - 1][s]];
            if s >= 1 {
                terms.push(a[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                terms.push(a[t - 1][s - 2]);
            }
            let inc = log_sum_exp(&terms);
            a[t][s] = if inc == NEG_INF { NEG_INF } else { inc + log_probs.get(t, ext[s]) };
        }
    }
    a
}

/// Suffix probabilities; beta[t][s] excludes the emission at frame t.
fn beta(log_probs: &Matrix, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut b = vec![vec![NEG_INF; states]; frames];
    b[frames - 1][states - 1] = 0.0;
    if states > 1 {
        b[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut terms = vec![b[t + 1][s] + log_probs.get(t + 1, ext[s])];
            if s + 1 < states {
                terms.push(b[t + 1][s + 1] + log_probs.get(t + 1, ext[s + 1]));
            }
            if s + 2 < states && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                terms.push(b[t + 1][s + 2] + log_probs.get(t + 1, ext[s + 2]));
            }
            b[t][s] = log_sum_exp(&terms);
        }
    }
    b
}

/// -log p(target | log_probs) over all blank-augmented alignments.
pub(crate) fn loss(log_probs: &Matrix, target: &[usize], blank: usize) -> f64 {
    let ext = extended(target, blank);
    let a = alpha(log_probs, &ext, blank);
    let last = &a[log_probs.rows() - 1];
    let states = ext.len();
    let mut terms = vec![last[states - 1]];
    if states > 1 {
        terms.push(last[states - 2]);
    }
    -log_sum_exp(&terms)
}

/// Gradient of the loss w.r.t. each log_probs entry, scaled by `upstream`.
pub(crate) fn grad_wrt_log_probs(
    log_probs: &Matrix,
    target: &[usize],
    blank: usize,
    upstream: f64,
) -> Matrix {
    let ext = extended(target, blank);
    let a = alpha(log_probs, &ext, blank);
    let b = beta(log_probs, &ext, blank);
    let frames = log_probs.rows();
    let classes = log_probs.cols();
    let states = ext.len();

    let last = &a[frames - 1];
    let mut total_terms = vec![last[states - 1]];
    if states > 1 {
        total_terms.push(last[states - 2]);
    }
    let log_total = log_sum_exp(&total_terms);

    let mut grad = Matrix::zeros(frames, classes);
    let mut per_class = vec![Vec::new(); classes];
    for t in 0..frames {
        for v in per_class.iter_mut() {
            v.clear();
        }
        for s in 0..states {
            let occ = a[t][s] + b[t][s];
            if occ > NEG_INF {
                per_class[ext[s]].push(occ);
            }
        }
        for (c, terms) in per_class.iter().enumerate() {
            if !terms.is_empty() {
                let g = -((log_sum_exp(terms) - log_total).exp());
                grad.set(t, c, upstream * g);
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_token() {
        // L=1, target "A": the only alignment is emitting A at frame 0.
        let q: f64 = 0.4;
        let lp = Matrix::from_vec(1, 3, vec![(0.3f64).ln(), q.ln(), (0.3f64).ln()]);
        let l = loss(&lp, &[1], 0);
        assert!((l - (-q.ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_token_enumerates() {
        // Alignments for "A" over 2 frames: AA, A_, _A.
        let p = [[0.2f64, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let lp = Matrix::from_fn(2, 3, |i, j| p[i][j].ln());
        let total = p[0][1] * p[1][1] + p[0][1] * p[1][0] + p[0][0] * p[1][1];
        let l = loss(&lp, &[1], 0);
        assert!((l - (-total.ln())).abs() < 1e-12);
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[1, 1]), 3);
        assert_eq!(min_frames(&[1, 2]), 2);
        assert_eq!(min_frames(&[]), 0);
    }
}
