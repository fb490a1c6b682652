//! The unsupervised adaptation objective stack: temperature-smoothed
//! softmax, entropy minimization over non-blank frames, minimum class
//! confusion, their weighted combination, and the CTC loss used for source
//! training and pseudo-labeling.
//!
//! Each loss exists in two forms: a numeric function over plain matrices
//! and a graph builder that records the same computation on a `Graph` so it
//! can be backpropagated into model parameters.

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, NodeId, LOG_FLOOR};
use crate::matrix::Matrix;

/// Row-stochastic L×C matrix produced by temperature softmax.
#[derive(Debug, Clone)]
pub struct ProbMatrix {
    values: Matrix,
    temperature_used: f64,
}

impl ProbMatrix {
    /// Wraps an existing matrix, checking the row-stochastic invariant.
    pub fn from_values(values: Matrix, temperature_used: f64) -> Result<Self> {
        for i in 0..values.rows() {
            let sum: f64 = values.row(i).iter().sum();
            contract!((sum - 1.0).abs() <= 1e-9, "probability row {i} sums to {sum}");
            contract!(
                values.row(i).iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)),
                "probability row {i} has entries outside [0, 1]"
            );
        }
        Ok(ProbMatrix { values, temperature_used })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn temperature_used(&self) -> f64 {
        self.temperature_used
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }
}

/// Which frames participate in the entropy loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    keep: Vec<bool>,
}

impl FrameMask {
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Denominator of the entropy term: the count of retained frames (default)
/// or the full frame count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum EntropyNorm {
    #[default]
    RetainedFrames,
    FullLength,
}

/// Value and diagnostics of the combined adaptation objective.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub loss: f64,
    pub entropy: f64,
    pub class_confusion: f64,
    pub retained_frames: usize,
}

fn check_temperature(t: f64) -> Result<()> {
    contract!(t > 0.0, "temperature must be positive, got {t}");
    Ok(())
}

/// Row-wise softmax of O/T. T >= 1 flattens; T = 1 is the plain softmax.
pub fn softmax_temperature(logits: &Matrix, t: f64) -> Result<ProbMatrix> {
    check_temperature(t)?;
    let mut values = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| ((x - m) / t).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            values.set(i, j, e / z);
        }
    }
    ProbMatrix::from_values(values, t)
}

/// Frames where the blank class is the argmax are dropped (ties resolve
/// toward the lowest class index, so a tie with blank at index 0 drops).
pub fn blank_mask(p: &ProbMatrix, blank_index: usize) -> Result<FrameMask> {
    contract!(blank_index < p.classes(), "blank index {} out of range {}", blank_index, p.classes());
    let keep = (0..p.frames())
        .map(|i| p.values.row_argmax(i) != blank_index)
        .collect();
    Ok(FrameMask { keep })
}

/// Mean Shannon entropy (natural log) over retained frames; 0 when nothing
/// is retained.
pub fn entropy_loss(p: &ProbMatrix, mask: &FrameMask) -> Result<f64> {
    entropy_loss_with(p, mask, EntropyNorm::RetainedFrames)
}

pub fn entropy_loss_with(p: &ProbMatrix, mask: &FrameMask, norm: EntropyNorm) -> Result<f64> {
    contract!(mask.len() == p.frames(), "mask length {} vs {} frames", mask.len(), p.frames());
    let retained = mask.retained();
    if retained == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &keep) in mask.keep.iter().enumerate() {
        if !keep {
            continue;
        }
        total -= p
            .values
            .row(i)
            .iter()
            .map(|&pij| pij * pij.max(LOG_FLOOR).ln())
            .sum::<f64>();
    }
    let denom = match norm {
        EntropyNorm::RetainedFrames => retained,
        EntropyNorm::FullLength => p.frames(),
    };
    Ok(total / denom as f64)
}

/// Sum of the off-diagonal entries of the C×C class Gram matrix P^T P.
/// No frame exclusion and no length normalization.
pub fn mcc_loss(p: &ProbMatrix) -> f64 {
    let pv = &p.values;
    let gram = pv.transpose().matmul(pv);
    let mut total = 0.0;
    for j in 0..gram.rows() {
        for k in 0..gram.cols() {
            if j != k {
                total += gram.get(j, k);
            }
        }
    }
    total
}

/// alpha * entropy + (1 - alpha) * class confusion, both computed on the
/// same temperature-smoothed distribution.
pub fn combined_loss(
    logits: &Matrix,
    alpha: f64,
    t: f64,
    blank_index: usize,
    norm: EntropyNorm,
) -> Result<CombinedLoss> {
    contract!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1], got {alpha}");
    let p = softmax_temperature(logits, t)?;
    let mask = blank_mask(&p, blank_index)?;
    let em = entropy_loss_with(&p, &mask, norm)?;
    let mcc = mcc_loss(&p);
    Ok(CombinedLoss {
        loss: alpha * em + (1.0 - alpha) * mcc,
        entropy: em,
        class_confusion: mcc,
        retained_frames: mask.retained(),
    })
}

/// CTC negative log-likelihood of `target` under per-frame log scores.
pub fn ctc_loss(log_probs: &Matrix, target: &[usize], blank_index: usize) -> Result<f64> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let node = g.ctc_loss(lp, target, blank_index)?;
    Ok(g.scalar(node))
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Records a temperature softmax of `logits` on the graph. The per-row max
/// is subtracted through a detached node, which leaves values and gradients
/// unchanged.
pub fn build_softmax_temperature(g: &mut Graph, logits: NodeId, t: f64) -> Result<NodeId> {
    check_temperature(t)?;
    let row_max = g.row_max_detached(logits);
    let neg_max = g.neg(row_max);
    let shifted = g.add(logits, neg_max)?;
    let scaled = g.scale(shifted, 1.0 / t);
    let e = g.exp(scaled);
    let z = g.row_sum(e);
    let inv_z = g.recip(z);
    g.mul(e, inv_z)
}

/// Records a numerically stable row-wise log-softmax, the input expected by
/// the CTC loss node.
pub fn build_log_softmax(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let row_max = g.row_max_detached(logits);
    let neg_max = g.neg(row_max);
    let shifted = g.add(logits, neg_max)?;
    let e = g.exp(shifted);
    let z = g.row_sum(e);
    let log_z = g.ln_clamped(z);
    let neg_log_z = g.neg(log_z);
    g.add(shifted, neg_log_z)
}

/// Records the combined objective on the graph and returns the loss node
/// plus its numeric diagnostics. The blank mask is computed from the current
/// smoothed distribution and held constant for differentiation.
pub fn build_combined_loss(
    g: &mut Graph,
    logits: NodeId,
    alpha: f64,
    t: f64,
    blank_index: usize,
    norm: EntropyNorm,
) -> Result<(NodeId, CombinedLoss)> {
    contract!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1], got {alpha}");
    let frames = g.value(logits).rows();
    if frames == 0 {
        return Err(Error::Data("combined loss: zero-frame input".into()));
    }
    let p = build_softmax_temperature(g, logits, t)?;
    let p_now = ProbMatrix::from_values(g.value(p).clone(), t)?;
    let mask = blank_mask(&p_now, blank_index)?;
    let retained = mask.retained();

    let em = if retained == 0 {
        g.constant(Matrix::zeros(1, 1))
    } else {
        let kept = g.row_mask_select(p, mask.keep())?;
        let log_kept = g.ln_clamped(kept);
        let plogp = g.mul(kept, log_kept)?;
        let total = g.sum(plogp);
        let denom = match norm {
            EntropyNorm::RetainedFrames => retained,
            EntropyNorm::FullLength => frames,
        };
        g.scale(total, -1.0 / denom as f64)
    };

    let pt = g.transpose(p);
    let gram = g.matmul(pt, p)?;
    let classes = g.value(logits).cols();
    let identity = g.constant(Matrix::from_fn(classes, classes, |i, j| f64::from(i == j)));
    let diag = g.mul(gram, identity)?;
    let gram_total = g.sum(gram);
    let diag_total = g.sum(diag);
    let neg_diag = g.neg(diag_total);
    let mcc = g.add(gram_total, neg_diag)?;

    let em_scaled = g.scale(em, alpha);
    let mcc_scaled = g.scale(mcc, 1.0 - alpha);
    let loss = g.add(em_scaled, mcc_scaled)?;

    let diagnostics = CombinedLoss {
        loss: g.scalar(loss),
        entropy: g.scalar(em),
        class_confusion: g.scalar(mcc),
        retained_frames: retained,
    };
    Ok((loss, diagnostics))
}
