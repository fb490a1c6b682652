//! Reverse-mode differentiation over a linear tape of 2-D matrix ops.
//!
//! Values are computed eagerly as nodes are recorded; `backward` replays the
//! tape in reverse, accumulating adjoints. Gradients flow only into nodes
//! reachable from a `requires_grad` leaf; everything else is skipped.
//!
//! A `Graph` is confined to one worker. Distinct graphs share nothing.

use crate::ctc;
use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;

/// Floor applied before taking logarithms, so log of a (numerically) zero
/// probability stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    /// Elementwise add; the second operand may be a 1×C row or an L×1 column,
    /// broadcast over the first.
    Add,
    /// Elementwise multiply, same broadcast rules as Add.
    Mul,
    Scale(f64),
    AddConst,
    Neg,
    Exp,
    /// ln(max(x, LOG_FLOOR)); zero derivative below the floor.
    LnClamped,
    Relu,
    Gelu,
    Recip,
    Sqrt,
    RowSum,
    RowMean,
    /// Population variance per row.
    RowVar,
    Sum,
    Mean,
    Transpose,
    /// Per-row maximum as an L×1 column, detached from differentiation.
    RowMaxDetached,
    /// Keeps rows where the mask is true; the mask is a constant.
    RowMaskSelect(Vec<bool>),
    ConcatRows,
    /// 1-D convolution over the time axis with zero "same" padding.
    /// Inputs: signal T×C_in, kernel (k·C_in)×C_out.
    Conv1d { kernel: usize, stride: usize },
    /// CTC negative log-likelihood of `target` given per-frame log scores.
    CtcLoss { target: Vec<usize>, blank: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass, indexed by node id. Only nodes with
/// `requires_grad` carry an entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// The cached value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(
            va.cols() == vb.rows(),
            "matmul: inner dims {}x{} vs {}x{}",
            va.rows(),
            va.cols(),
            vb.rows(),
            vb.cols()
        );
        let value = va.matmul(vb);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul, vec![a, b], value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul, vec![a, b], value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        let rg = self.any_grad(&[a]);
        self.push(Op::Scale(c), vec![a], value, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(Op::AddConst, vec![a], value, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| -x);
        let rg = self.any_grad(&[a]);
        self.push(Op::Neg, vec![a], value, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(Op::Exp, vec![a], value, rg)
    }

    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let rg = self.any_grad(&[a]);
        self.push(Op::LnClamped, vec![a], value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(Op::Relu, vec![a], value, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(Op::Gelu, vec![a], value, rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| 1.0 / x);
        let rg = self.any_grad(&[a]);
        self.push(Op::Recip, vec![a], value, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.any_grad(&[a]);
        self.push(Op::Sqrt, vec![a], value, rg)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Matrix::from_fn(v.rows(), 1, |i, _| v.row(i).iter().sum());
        let rg = self.any_grad(&[a]);
        self.push(Op::RowSum, vec![a], value, rg)
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let d = v.cols() as f64;
        let value = Matrix::from_fn(v.rows(), 1, |i, _| v.row(i).iter().sum::<f64>() / d);
        let rg = self.any_grad(&[a]);
        self.push(Op::RowMean, vec![a], value, rg)
    }

    pub fn row_var(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let d = v.cols() as f64;
        let value = Matrix::from_fn(v.rows(), 1, |i, _| {
            let mu = v.row(i).iter().sum::<f64>() / d;
            v.row(i).iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d
        });
        let rg = self.any_grad(&[a]);
        self.push(Op::RowVar, vec![a], value, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.any_grad(&[a]);
        self.push(Op::Sum, vec![a], value, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Matrix::from_vec(1, 1, vec![v.sum() / v.len() as f64]);
        let rg = self.any_grad(&[a]);
        self.push(Op::Mean, vec![a], value, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(Op::Transpose, vec![a], value, rg)
    }

    /// Per-row maximum, treated as a constant by backward.
    pub fn row_max_detached(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Matrix::from_fn(v.rows(), 1, |i, _| {
            v.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        self.push(Op::RowMaxDetached, vec![a], value, false)
    }

    pub fn row_mask_select(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let v = self.value(a);
        contract!(keep.len() == v.rows(), "row_mask_select: mask length {} vs {} rows", keep.len(), v.rows());
        let kept = keep.iter().filter(|&&k| k).count();
        let mut data = Vec::with_capacity(kept * v.cols());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                data.extend_from_slice(v.row(i));
            }
        }
        let value = Matrix::from_vec(kept, v.cols(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::RowMaskSelect(keep.to_vec()), vec![a], value, rg))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        contract!(va.cols() == vb.cols(), "concat_rows: {} vs {} cols", va.cols(), vb.cols());
        let mut data = Vec::with_capacity((va.rows() + vb.rows()) * va.cols());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Matrix::from_vec(va.rows() + vb.rows(), va.cols(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatRows, vec![a, b], value, rg))
    }

    /// `signal` is T×C_in, `weights` is (kernel·C_in)×C_out. Zero-padded so
    /// that the output has ceil(T / stride) frames; stride 1 preserves T.
    pub fn conv1d(&mut self, signal: NodeId, weights: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (x, w) = (self.value(signal), self.value(weights));
        contract!(kernel >= 1, "conv1d: kernel width must be >= 1");
        contract!(stride >= 1, "conv1d: stride must be >= 1");
        contract!(
            w.rows() == kernel * x.cols(),
            "conv1d: weights have {} rows, expected kernel {} x channels {}",
            w.rows(),
            kernel,
            x.cols()
        );
        let value = conv1d_forward(x, w, kernel, stride);
        let rg = self.any_grad(&[signal, weights]);
        Ok(self.push(Op::Conv1d { kernel, stride }, vec![signal, weights], value, rg))
    }

    /// CTC negative log-likelihood; `log_probs` is L×C of per-frame log
    /// scores (a log-softmax output in normal use).
    pub fn ctc_loss(&mut self, log_probs: NodeId, target: &[usize], blank: usize) -> Result<NodeId> {
        let lp = self.value(log_probs);
        let classes = lp.cols();
        contract!(blank < classes, "ctc_loss: blank index {} out of range {}", blank, classes);
        for &t in target {
            if t >= classes || t == blank {
                return Err(Error::Data(format!("ctc_loss: invalid target token {t}")));
            }
        }
        let need = ctc::min_frames(target);
        if lp.rows() < need {
            return Err(Error::Data(format!(
                "ctc_loss: target needs {} frames but only {} available",
                need,
                lp.rows()
            )));
        }
        let value = Matrix::from_vec(1, 1, vec![ctc::loss(lp, target, blank)]);
        let rg = self.any_grad(&[log_probs]);
        Ok(self.push(Op::CtcLoss { target: target.to_vec(), blank }, vec![log_probs], value, rg))
    }

    /// Row-wise standardization (population variance + eps) with affine
    /// scale/shift; gamma and beta are 1×D.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).cols();
        contract!(d >= 1, "layer_norm: empty rows");
        contract!(eps > 0.0, "layer_norm: eps must be positive");
        contract!(self.value(gamma).shape() == (1, d), "layer_norm: gamma must be 1x{d}");
        contract!(self.value(beta).shape() == (1, d), "layer_norm: beta must be 1x{d}");
        let mu = self.row_mean(x);
        let var = self.row_var(x);
        let neg_mu = self.neg(mu);
        let centered = self.add(x, neg_mu)?;
        let var_eps = self.add_const(var, eps);
        let std = self.sqrt(var_eps);
        let inv_std = self.recip(std);
        let standardized = self.mul(centered, inv_std)?;
        let scaled = self.mul(standardized, gamma)?;
        self.add(scaled, beta)
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate additively
    /// when a node feeds several consumers; each call starts from zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        contract!(
            self.value(loss).shape() == (1, 1),
            "backward: loss node must be scalar, got {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        // Strip adjoints of nodes that do not require gradients.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let input_grads: Vec<(NodeId, Matrix)> = match &node.op {
            Op::Leaf | Op::RowMaxDetached => vec![],
            Op::MatMul => {
                let a = self.value(node.inputs[0]);
                let b = self.value(node.inputs[1]);
                vec![
                    (node.inputs[0], g.matmul(&b.transpose())),
                    (node.inputs[1], a.transpose().matmul(g)),
                ]
            }
            Op::Add => {
                let b_shape = self.value(node.inputs[1]).shape();
                vec![
                    (node.inputs[0], g.clone()),
                    (node.inputs[1], reduce_to_shape(g, b_shape)),
                ]
            }
            Op::Mul => {
                let a = self.value(node.inputs[0]);
                let b = self.value(node.inputs[1]);
                let ga = broadcast_zip(g, b, |gx, bx| gx * bx).expect("shapes checked at build");
                let gb_full = g.zip(a, |gx, ax| gx * ax);
                vec![
                    (node.inputs[0], ga),
                    (node.inputs[1], reduce_to_shape(&gb_full, b.shape())),
                ]
            }
            Op::Scale(c) => vec![(node.inputs[0], g.map(|x| c * x))],
            Op::AddConst => vec![(node.inputs[0], g.clone())],
            Op::Neg => vec![(node.inputs[0], g.map(|x| -x))],
            Op::Exp => vec![(node.inputs[0], g.zip(&node.value, |gx, y| gx * y))],
            Op::LnClamped => {
                let x = self.value(node.inputs[0]);
                vec![(node.inputs[0], g.zip(x, |gx, xv| if xv > LOG_FLOOR { gx / xv } else { 0.0 }))]
            }
            Op::Relu => {
                let x = self.value(node.inputs[0]);
                vec![(node.inputs[0], g.zip(x, |gx, xv| if xv > 0.0 { gx } else { 0.0 }))]
            }
            Op::Gelu => {
                let x = self.value(node.inputs[0]);
                vec![(node.inputs[0], g.zip(x, |gx, xv| gx * gelu_derivative(xv)))]
            }
            Op::Recip => vec![(node.inputs[0], g.zip(&node.value, |gx, y| -gx * y * y))],
            Op::Sqrt => vec![(node.inputs[0], g.zip(&node.value, |gx, y| gx / (2.0 * y)))],
            Op::RowSum => {
                let x = self.value(node.inputs[0]);
                vec![(node.inputs[0], Matrix::from_fn(x.rows(), x.cols(), |i, _| g.get(i, 0)))]
            }
            Op::RowMean => {
                let x = self.value(node.inputs[0]);
                let d = x.cols() as f64;
                vec![(node.inputs[0], Matrix::from_fn(x.rows(), x.cols(), |i, _| g.get(i, 0) / d))]
            }
            Op::RowVar => {
                let x = self.value(node.inputs[0]);
                let d = x.cols() as f64;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let mu = x.row(i).iter().sum::<f64>() / d;
                    for j in 0..x.cols() {
                        out.set(i, j, g.get(i, 0) * 2.0 * (x.get(i, j) - mu) / d);
                    }
                }
                vec![(node.inputs[0], out)]
            }
            Op::Sum => {
                let x = self.value(node.inputs[0]);
                vec![(node.inputs[0], Matrix::filled(x.rows(), x.cols(), g.get(0, 0)))]
            }
            Op::Mean => {
                let x = self.value(node.inputs[0]);
                let scale = g.get(0, 0) / x.len() as f64;
                vec![(node.inputs[0], Matrix::filled(x.rows(), x.cols(), scale))]
            }
            Op::Transpose => vec![(node.inputs[0], g.transpose())],
            Op::RowMaskSelect(keep) => {
                let x = self.value(node.inputs[0]);
                let mut out = Matrix::zeros(x.rows(), x.cols());
                let mut src = 0;
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        for j in 0..x.cols() {
                            out.set(i, j, g.get(src, j));
                        }
                        src += 1;
                    }
                }
                vec![(node.inputs[0], out)]
            }
            Op::ConcatRows => {
                let a = self.value(node.inputs[0]);
                let b = self.value(node.inputs[1]);
                let mut ga = Matrix::zeros(a.rows(), a.cols());
                let mut gb = Matrix::zeros(b.rows(), b.cols());
                ga.data_mut().copy_from_slice(&g.data()[..a.len()]);
                gb.data_mut().copy_from_slice(&g.data()[a.len()..]);
                vec![(node.inputs[0], ga), (node.inputs[1], gb)]
            }
            Op::Conv1d { kernel, stride } => {
                let x = self.value(node.inputs[0]);
                let w = self.value(node.inputs[1]);
                let (gx, gw) = conv1d_backward(x, w, g, *kernel, *stride);
                vec![(node.inputs[0], gx), (node.inputs[1], gw)]
            }
            Op::CtcLoss { target, blank } => {
                let lp = self.value(node.inputs[0]);
                vec![(node.inputs[0], ctc::grad_wrt_log_probs(lp, target, *blank, g.get(0, 0)))]
            }
        };

        for (input, ig) in input_grads {
            if !self.nodes[input.0].requires_grad {
                continue;
            }
            match &mut grads[input.0] {
                Some(acc) => acc.add_scaled(&ig, 1.0),
                slot => *slot = Some(ig),
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Elementwise combine with the second operand optionally broadcast from a
/// 1×C row or an L×1 column.
fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if a.shape() == b.shape() {
        return Ok(a.zip(b, f));
    }
    if b.shape() == (1, a.cols()) {
        return Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), b.get(0, j))));
    }
    if b.shape() == (a.rows(), 1) {
        return Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), b.get(i, 0))));
    }
    Err(Error::Contract(format!(
        "elementwise op: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

/// Sum a full-shape gradient down to the (possibly broadcast) operand shape.
fn reduce_to_shape(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    if shape == (1, g.cols()) {
        return Matrix::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum());
    }
    debug_assert_eq!(shape, (g.rows(), 1));
    Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum())
}

fn conv1d_forward(x: &Matrix, w: &Matrix, kernel: usize, stride: usize) -> Matrix {
    let t_in = x.rows();
    let c_in = x.cols();
    let c_out = w.cols();
    let left = (kernel - 1) / 2;
    let frames = (t_in + stride - 1) / stride;
    let mut out = Matrix::zeros(frames, c_out);
    for o in 0..frames {
        for dk in 0..kernel {
            let t = (o * stride + dk) as isize - left as isize;
            if t < 0 || t as usize >= t_in {
                continue;
            }
            let t = t as usize;
            for ci in 0..c_in {
                let xv = x.get(t, ci);
                if xv == 0.0 {
                    continue;
                }
                let wrow = w.row(dk * c_in + ci);
                for co in 0..c_out {
                    let cur = out.get(o, co);
                    out.set(o, co, cur + xv * wrow[co]);
                }
            }
        }
    }
    out
}

fn conv1d_backward(x: &Matrix, w: &Matrix, g: &Matrix, kernel: usize, stride: usize) -> (Matrix, Matrix) {
    let t_in = x.rows();
    let c_in = x.cols();
    let c_out = w.cols();
    let left = (kernel - 1) / 2;
    let mut gx = Matrix::zeros(t_in, c_in);
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    for o in 0..g.rows() {
        for dk in 0..kernel {
            let t = (o * stride + dk) as isize - left as isize;
            if t < 0 || t as usize >= t_in {
                continue;
            }
            let t = t as usize;
            for ci in 0..c_in {
                let xv = x.get(t, ci);
                let mut acc = 0.0;
                for co in 0..c_out {
                    let gv = g.get(o, co);
                    acc += gv * w.get(dk * c_in + ci, co);
                    let cur = gw.get(dk * c_in + ci, co);
                    gw.set(dk * c_in + ci, co, cur + gv * xv);
                }
                let cur = gx.get(t, ci);
                gx.set(t, ci, cur + acc);
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::filled(2, 3, 1.0));
        let b = g.constant(Matrix::filled(3, 4, 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), (2, 4));
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]));
        let z = g.constant(Matrix::zeros(2, 2));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn log_exp_inverse() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(1, 4, vec![-10.0, -0.5, 3.0, 10.0]));
        let e = g.exp(x);
        let back = g.ln_clamped(e);
        assert!(g.value(back).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let expected = Matrix::from_vec(1, 3, vec![2.0, -4.0, 1.0]);
        assert!(grads.get(x).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn backward_without_grad_leaves_is_empty() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(2, 2, 1.0));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::filled(2, 2, 1.0), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(2, 5, 3.7));
        let gamma = g.constant(Matrix::filled(1, 5, 1.0));
        let beta = g.constant(Matrix::zeros(1, 5));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(&Matrix::zeros(2, 5)) < 1e-9);
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let gamma = g.constant(Matrix::filled(1, 2, 1.0));
        let beta = g.constant(Matrix::zeros(1, 2));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let expected = Matrix::from_vec(1, 2, vec![1.0, -1.0]);
        assert!(g.value(y).max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn conv1d_stride_one_preserves_length() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(7, 3, 1.0));
        let w = g.constant(Matrix::filled(9, 4, 0.1));
        let y = g.conv1d(x, w, 3, 1).unwrap();
        assert_eq!(g.value(y).shape(), (7, 4));
        let y2 = g.conv1d(x, w, 3, 2).unwrap();
        assert_eq!(g.value(y2).rows(), 4);
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Matrix::from_fn(3, 4, |i, j| (i as f64 - 1.3) * (j as f64 + 0.7)), true);
            let w = g.leaf(Matrix::from_fn(4, 2, |i, j| 0.1 * i as f64 - 0.2 * j as f64), true);
            let h = g.matmul(x, w).unwrap();
            let r = g.gelu(h);
            let loss = g.mean(r);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                grads.get(x).unwrap().data().to_vec(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
