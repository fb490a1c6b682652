//! Finite-difference oracle for every differentiable operation and for the
//! loss builders. The analytic adjoint from `backward` must agree with a
//! central difference of the recorded scalar within rel 1e-4 / abs 1e-7.
//!
//! Inputs are sampled away from the non-smooth points of each op (relu and
//! argmax kinks, the log floor), where the derivative is defined.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use suta_core::graph::{Graph, NodeId};
use suta_core::losses::{build_combined_loss, build_log_softmax, build_softmax_temperature};
use suta_core::matrix::Matrix;
use suta_core::EntropyNorm;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Checks d(loss)/d(input_k) for every input against central differences.
/// `build` must record the same scalar function on any fresh graph.
fn check_grad(name: &str, inputs: &[Matrix], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let record = |pert: &[Matrix]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pert.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        (g, ids, loss)
    };

    let (g, ids, loss) = record(inputs);
    assert_eq!(g.value(loss).shape(), (1, 1), "{name}: probe loss must be scalar");
    let grads = g.backward(loss).expect("backward");

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .unwrap_or_else(|| panic!("{name}: missing gradient for input {k}"));
        assert_eq!(analytic.shape(), input.shape(), "{name}: gradient shape");
        for idx in 0..input.len() {
            let eval = |delta: f64| {
                let mut pert = inputs.to_vec();
                pert[k].data_mut()[idx] += delta;
                let (g, _, loss) = record(&pert);
                g.scalar(loss)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let analytic_v = analytic.data()[idx];
            let err = (analytic_v - numeric).abs();
            let tol = ABS_TOL + REL_TOL * analytic_v.abs().max(numeric.abs());
            assert!(
                err <= tol,
                "{name}: input {k} entry {idx}: analytic {analytic_v} vs numeric {numeric} (err {err:.3e} > tol {tol:.3e})"
            );
        }
    }
}

/// Scalar probe: weight the op output by a fixed random matrix and sum, so
/// the adjoint reaching the op is non-uniform.
fn probed(
    name: &str,
    inputs: &[Matrix],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) {
    // Shape of the op output, discovered with a throwaway graph.
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let out = op(&mut g, &ids);
        g.value(out).shape()
    };
    let weights = normal_matrix(out_shape.0, out_shape.1, rng);
    check_grad(name, inputs, &|g, ids| {
        let out = op(g, ids);
        let w = g.constant(weights.clone());
        let weighted = g.mul(out, w).expect("probe mul");
        g.sum(weighted)
    });
}

const INSTANCES: usize = 100;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    type Builder = fn(&mut Graph, NodeId) -> NodeId;
    // (name, op, sampler keeping inputs inside the smooth region)
    let cases: Vec<(&str, Builder, fn(&mut ChaCha8Rng) -> f64)> = vec![
        ("neg", |g, a| g.neg(a), |r| r.sample(StandardNormal)),
        ("exp", |g, a| g.exp(a), |r| r.sample::<f64, _>(StandardNormal)),
        ("scale", |g, a| g.scale(a, -1.7), |r| r.sample(StandardNormal)),
        ("add_const", |g, a| g.add_const(a, 0.37), |r| r.sample(StandardNormal)),
        ("ln_clamped", |g, a| g.ln_clamped(a), |r| 0.05 + r.gen_range(0.0..3.0)),
        ("relu", |g, a| g.relu(a), |r| {
            let x: f64 = r.sample(StandardNormal);
            if x.abs() < 10.0 * H { x + 0.1 } else { x }
        }),
        ("gelu", |g, a| g.gelu(a), |r| r.sample::<f64, _>(StandardNormal) * 2.0),
        ("recip", |g, a| g.recip(a), |r| {
            let s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            s * (0.3 + r.gen_range(0.0..2.0))
        }),
        ("sqrt", |g, a| g.sqrt(a), |r| 0.1 + r.gen_range(0.0..4.0)),
    ];
    for (name, op, sample) in cases {
        for _ in 0..INSTANCES {
            let (r, c) = dims(&mut rng);
            let x = Matrix::from_fn(r, c, |_, _| sample(&mut rng));
            probed(name, &[x], &mut rng, |g, ids| op(g, ids[0]));
        }
    }
}

#[test]
fn reductions_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..INSTANCES {
        let (r, c) = dims(&mut rng);
        let x = normal_matrix(r, c, &mut rng);
        probed("row_sum", &[x.clone()], &mut rng, |g, ids| g.row_sum(ids[0]));
        probed("row_mean", &[x.clone()], &mut rng, |g, ids| g.row_mean(ids[0]));
        probed("row_var", &[x.clone()], &mut rng, |g, ids| g.row_var(ids[0]));
        probed("transpose", &[x.clone()], &mut rng, |g, ids| g.transpose(ids[0]));
        check_grad("sum", &[x.clone()], &|g, ids| g.sum(ids[0]));
        check_grad("mean", &[x], &|g, ids| g.mean(ids[0]));
    }
}

#[test]
fn binary_ops_with_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..INSTANCES {
        let (r, c) = dims(&mut rng);
        let a = normal_matrix(r, c, &mut rng);
        let shapes = [(r, c), (1, c), (r, 1)];
        let (br, bc) = shapes[rng.gen_range(0..shapes.len())];
        let b = normal_matrix(br, bc, &mut rng);
        probed("add", &[a.clone(), b.clone()], &mut rng, |g, ids| g.add(ids[0], ids[1]).unwrap());
        probed("mul", &[a, b], &mut rng, |g, ids| g.mul(ids[0], ids[1]).unwrap());
    }
}

#[test]
fn matmul_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..INSTANCES {
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=4);
        let a = normal_matrix(m, k, &mut rng);
        let b = normal_matrix(k, n, &mut rng);
        probed("matmul", &[a, b], &mut rng, |g, ids| g.matmul(ids[0], ids[1]).unwrap());

        let (r, c) = dims(&mut rng);
        let top = normal_matrix(r, c, &mut rng);
        let bottom = normal_matrix(rng.gen_range(1..=4), c, &mut rng);
        probed("concat_rows", &[top, bottom], &mut rng, |g, ids| {
            g.concat_rows(ids[0], ids[1]).unwrap()
        });
    }
}

#[test]
fn row_mask_select() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..INSTANCES {
        let (r, c) = dims(&mut rng);
        let x = normal_matrix(r, c, &mut rng);
        let mut keep: Vec<bool> = (0..r).map(|_| rng.gen_bool(0.6)).collect();
        keep[rng.gen_range(0..r)] = true; // probe needs a non-empty output
        let keep_for_op = keep.clone();
        probed("row_mask_select", &[x], &mut rng, move |g, ids| {
            g.row_mask_select(ids[0], &keep_for_op).unwrap()
        });
    }
}

#[test]
fn conv1d_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..INSTANCES {
        let t = rng.gen_range(2..=6);
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let kernel = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let x = normal_matrix(t, c_in, &mut rng);
        let w = normal_matrix(kernel * c_in, c_out, &mut rng);
        probed("conv1d", &[x, w], &mut rng, move |g, ids| {
            g.conv1d(ids[0], ids[1], kernel, stride).unwrap()
        });
    }
}

#[test]
fn layer_norm_all_three_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..INSTANCES {
        let r = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=5);
        let x = normal_matrix(r, d, &mut rng);
        let gamma = Matrix::from_fn(1, d, |_, _| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let beta = normal_matrix(1, d, &mut rng);
        probed("layer_norm", &[x, gamma, beta], &mut rng, |g, ids| {
            g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap()
        });
    }
}

#[test]
fn softmax_and_log_softmax_builders() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for _ in 0..INSTANCES {
        let (r, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let logits = normal_matrix(r, c, &mut rng);
        for t in [1.0, 2.5] {
            probed("softmax_temperature", &[logits.clone()], &mut rng, move |g, ids| {
                build_softmax_temperature(g, ids[0], t).unwrap()
            });
        }
        probed("log_softmax", &[logits], &mut rng, |g, ids| {
            build_log_softmax(g, ids[0]).unwrap()
        });
    }
}

#[test]
fn combined_loss_builder() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    // Fewer instances per setting: each case exercises the full stack and
    // the settings grid already multiplies coverage.
    for _ in 0..30 {
        let frames = rng.gen_range(2..=5);
        let classes = rng.gen_range(3..=5);
        // Spread logits enough that argmax margins are far wider than H, so
        // the blank mask is locally constant and the loss differentiable.
        let logits = Matrix::from_fn(frames, classes, |_, _| {
            3.0 * rng.sample::<f64, _>(StandardNormal)
        });
        for alpha in [0.0, 0.3, 1.0] {
            for t in [1.0, 2.5] {
                for norm in [EntropyNorm::RetainedFrames, EntropyNorm::FullLength] {
                    check_grad("combined_loss", &[logits.clone()], &|g, ids| {
                        build_combined_loss(g, ids[0], alpha, t, 0, norm).unwrap().0
                    });
                }
            }
        }
    }
}

#[test]
fn ctc_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for _ in 0..INSTANCES {
        let classes = rng.gen_range(3..=5);
        let target_len = rng.gen_range(1..=3);
        let target: Vec<usize> = (0..target_len).map(|_| rng.gen_range(1..classes)).collect();
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        let frames = target_len + repeats + rng.gen_range(0..=3);
        let log_probs = Matrix::from_fn(frames, classes, |_, _| {
            rng.sample::<f64, _>(StandardNormal) - 1.0
        });
        let target_for_op = target.clone();
        check_grad("ctc_loss", &[log_probs], &move |g, ids| {
            g.ctc_loss(ids[0], &target_for_op, 0).unwrap()
        });
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    use suta_core::model::{ModelConfig, ModelState};

    // End-to-end spot check: combined loss through the real forward pass,
    // FD on a handful of entries of every trainable group.
    let cfg = ModelConfig {
        feature_dim: 3,
        conv_layers: 1,
        kernel_width: 3,
        conv_channels: 4,
        conv_stride: 1,
        encoder_blocks: 1,
        encoder_hidden: 5,
        vocab_size: 4,
        seed: 7,
    };
    let model = ModelState::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let features = normal_matrix(6, cfg.feature_dim, &mut rng);

    let loss_of = |m: &ModelState| {
        let mut fw = m.forward(&features).unwrap();
        let (loss, _) =
            build_combined_loss(&mut fw.graph, fw.logits, 0.3, 2.5, 0, EntropyNorm::RetainedFrames)
                .unwrap();
        (fw, loss)
    };

    let (fw, loss) = loss_of(&model);
    let grads = fw.graph.backward(loss).unwrap();
    let named = fw.trainable_grads(&grads);
    assert!(!named.is_empty());

    for (name, grad) in &named {
        let entries = grad.len().min(4);
        for idx in 0..entries {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.param_mut(name).unwrap().data_mut()[idx] += delta;
                let (fw, loss) = loss_of(&m);
                fw.graph.scalar(loss)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let analytic = grad.data()[idx];
            let err = (analytic - numeric).abs();
            let tol = 1e-6 + REL_TOL * analytic.abs().max(numeric.abs());
            assert!(
                err <= tol,
                "model grad {name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
