//! Central finite-difference verification of every layer kind's analytic
//! gradients, in f64. Used both by the test suites and the `gradcheck` CLI
//! subcommand.
//!
//! Each case builds a tiny single-kind network with random shapes, runs one
//! train-mode forward/backward under the scalar loss `sum(r * y)` with fixed
//! random coefficients, and compares every parameter and input gradient
//! against `(L(t + eps) - L(t - eps)) / (2 eps)`. Non-smooth layers (ReLU,
//! max pooling) get inputs nudged away from their kinks so the difference
//! quotient is valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{softmax_xent_batch, softmax_xent_grad};
use super::{LayerSpec, Mode, NetSpec, Network, Tensor};
use crate::error::Result;

/// Finite-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// Default relative-error tolerance.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Every checkable layer kind, including the implicit concat wiring and the
/// loss head.
pub const LAYER_KINDS: [&str; 9] = [
    "dense",
    "conv3x3",
    "maxpool2",
    "relu",
    "batchnorm",
    "dropout",
    "globalavgpool",
    "concat",
    "softmax_xent",
];

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub kind: String,
    pub cases: usize,
    pub gradients_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<14} cases={:<3} grads={:<5} max_rel_err={:.3e}  {}",
            self.kind,
            self.cases,
            self.gradients_checked,
            self.max_rel_err,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute fallback for near-zero gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale > 1e-4 {
        (a - n).abs() / scale
    } else {
        (a - n).abs()
    }
}

/// Runs `cases` random checks for one layer kind.
pub fn check_kind(kind: &str, cases: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for case in 0..cases {
        let case_seed = seed
            .wrapping_mul(1_000_003)
            .wrapping_add(case as u64)
            .wrapping_mul(2_654_435_761);
        let (err, n) = if kind == "softmax_xent" {
            check_softmax_case(case_seed)?
        } else {
            check_net_case(kind, case_seed)?
        };
        max_err = max_err.max(err);
        checked += n;
    }
    Ok(GradCheckReport {
        kind: kind.into(),
        cases,
        gradients_checked: checked,
        max_rel_err: max_err,
        tolerance: tol,
        pass: max_err < tol,
    })
}

/// Runs the full table at the spec tolerances.
pub fn check_all(cases: usize, seed: u64, tol: f64) -> Result<Vec<GradCheckReport>> {
    LAYER_KINDS
        .iter()
        .map(|k| check_kind(k, cases, seed, tol))
        .collect()
}

fn check_softmax_case(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..4usize);
    let n = rng.gen_range(2..6usize);
    let logits: Vec<f64> = (0..batch * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
    let t = Tensor::from_vec([batch, n, 1, 1], logits.clone());
    let (_, probs) = softmax_xent_batch(&t, &targets)?;
    let analytic = softmax_xent_grad(&probs, &targets);

    let mut max_err = 0.0f64;
    for i in 0..logits.len() {
        let mut lo = logits.clone();
        let mut hi = logits.clone();
        hi[i] += FD_EPSILON;
        lo[i] -= FD_EPSILON;
        let (lh, _) = softmax_xent_batch(&Tensor::from_vec([batch, n, 1, 1], hi), &targets)?;
        let (ll, _) = softmax_xent_batch(&Tensor::from_vec([batch, n, 1, 1], lo), &targets)?;
        let numeric = (lh - ll) / (2.0 * FD_EPSILON);
        max_err = max_err.max(rel_err(analytic.data[i], numeric));
    }
    Ok((max_err, logits.len()))
}

/// Builds the (spec, input shapes) pair for one layer kind with random
/// sizes.
fn case_net(kind: &str, rng: &mut ChaCha8Rng) -> (NetSpec, Vec<[usize; 4]>) {
    let single = |layer: LayerSpec, shape: [usize; 4]| (
        NetSpec {
            branches: vec![vec![layer]],
            trunk: vec![],
        },
        vec![shape],
    );
    match kind {
        "dense" => {
            let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
            single(
                LayerSpec::Dense {
                    in_features: i,
                    out_features: o,
                },
                [b, i, 1, 1],
            )
        }
        "conv3x3" => {
            let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
            single(
                LayerSpec::Conv3x3 {
                    in_channels: c,
                    out_channels: o,
                },
                [b, c, h, w],
            )
        }
        "maxpool2" => {
            let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (2 * rng.gen_range(1..4usize), 2 * rng.gen_range(1..4usize));
            single(LayerSpec::MaxPool2, [b, c, h, w])
        }
        "relu" => {
            let (b, f) = (rng.gen_range(1..4), rng.gen_range(1..8));
            single(LayerSpec::Relu, [b, f, 1, 1])
        }
        "batchnorm" => {
            // Alternate between vector and spatial inputs.
            if rng.gen_bool(0.5) {
                let (b, f) = (rng.gen_range(2..5), rng.gen_range(1..5));
                single(
                    LayerSpec::BatchNorm {
                        features: f,
                        momentum: 0.1,
                        eps: 1e-5,
                    },
                    [b, f, 1, 1],
                )
            } else {
                let (b, c) = (rng.gen_range(2..4), rng.gen_range(1..3));
                let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
                single(
                    LayerSpec::BatchNorm {
                        features: c,
                        momentum: 0.1,
                        eps: 1e-5,
                    },
                    [b, c, h, w],
                )
            }
        }
        "dropout" => {
            let p = [0.0, 0.3, 0.7][rng.gen_range(0..3)];
            let (b, f) = (rng.gen_range(1..4), rng.gen_range(2..8));
            single(LayerSpec::Dropout { p }, [b, f, 1, 1])
        }
        "globalavgpool" => {
            let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
            single(LayerSpec::GlobalAvgPool, [b, c, h, w])
        }
        "concat" => {
            let b = rng.gen_range(1..3);
            let (ia, oa) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (ib, ob) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let out = rng.gen_range(1..4);
            (
                NetSpec {
                    branches: vec![
                        vec![LayerSpec::Dense {
                            in_features: ia,
                            out_features: oa,
                        }],
                        vec![LayerSpec::Dense {
                            in_features: ib,
                            out_features: ob,
                        }],
                    ],
                    trunk: vec![LayerSpec::Dense {
                        in_features: oa + ob,
                        out_features: out,
                    }],
                },
                vec![[b, ia, 1, 1], [b, ib, 1, 1]],
            )
        }
        other => panic!("unknown layer kind `{other}`"),
    }
}

fn gen_inputs(kind: &str, shapes: &[[usize; 4]], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .map(|&shape| {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match kind {
                // Keep ReLU inputs away from the kink at zero.
                "relu" => (0..len)
                    .map(|_| {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        sign * rng.gen_range(0.05..2.0)
                    })
                    .collect(),
                // Keep pooling windows free of near-ties so the argmax is
                // stable under the probe step.
                "maxpool2" => {
                    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.1).collect();
                    use rand::seq::SliceRandom;
                    vals.shuffle(rng);
                    vals
                }
                _ => (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            Tensor::from_vec(shape, data)
        })
        .collect()
}

/// Scalar probe loss: sum of r (*) y.
fn probe_loss(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn forward_loss(
    net: &Network<f64>,
    inputs: &[Tensor<f64>],
    r: &[f64],
) -> Result<f64> {
    let mut net = net.clone();
    let y = net.forward(inputs, Mode::Train)?;
    Ok(probe_loss(&y, r))
}

fn param_count(net: &mut Network<f64>) -> usize {
    let mut total = 0;
    net.visit_params(&mut |_, t| total += t.len());
    total
}

fn perturb_param(net: &mut Network<f64>, flat: usize, delta: f64) {
    let mut offset = 0usize;
    net.visit_params(&mut |_, t| {
        if flat >= offset && flat < offset + t.len() {
            t.data[flat - offset] += delta;
        }
        offset += t.len();
    });
}

fn collect_param_grads(net: &mut Network<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit_params(&mut |_, t| out.extend_from_slice(t.grad.as_ref().unwrap()));
    out
}

fn check_net_case(kind: &str, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, shapes) = case_net(kind, &mut rng);
    let net0: Network<f64> = spec.build(seed)?;
    let inputs = gen_inputs(kind, &shapes, &mut rng);

    // Probe the output shape once to size the coefficient vector.
    let y0 = {
        let mut probe = net0.clone();
        probe.forward(&inputs, Mode::Train)?
    };
    let r: Vec<f64> = (0..y0.len())
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.5..1.5)
        })
        .collect();

    // Analytic pass.
    let mut net_a = net0.clone();
    let y = net_a.forward(&inputs, Mode::Train)?;
    let dy = Tensor::from_vec(y.shape(), r.clone());
    let input_grads = net_a.backward(&dy)?;
    let analytic_params = collect_param_grads(&mut net_a);

    let mut max_err = 0.0f64;
    let mut checked = 0usize;

    // Parameter gradients.
    let n_params = param_count(&mut net0.clone());
    for flat in 0..n_params {
        let mut hi = net0.clone();
        perturb_param(&mut hi, flat, FD_EPSILON);
        let mut lo = net0.clone();
        perturb_param(&mut lo, flat, -FD_EPSILON);
        let numeric =
            (forward_loss(&hi, &inputs, &r)? - forward_loss(&lo, &inputs, &r)?) / (2.0 * FD_EPSILON);
        max_err = max_err.max(rel_err(analytic_params[flat], numeric));
        checked += 1;
    }

    // Input gradients.
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut hi = inputs.to_vec();
            hi[ti].data[i] += FD_EPSILON;
            let mut lo = inputs.to_vec();
            lo[ti].data[i] -= FD_EPSILON;
            let numeric =
                (forward_loss(&net0, &hi, &r)? - forward_loss(&net0, &lo, &r)?) / (2.0 * FD_EPSILON);
            max_err = max_err.max(rel_err(input_grads[ti].data[i], numeric));
            checked += 1;
        }
    }

    Ok((max_err, checked))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every layer kind passes the finite-difference check over 20 random
    /// shapes and seeds.
    #[test]
    fn all_layer_kinds_pass_fd_checks() {
        let reports = check_all(20, 42, FD_TOLERANCE).unwrap();
        assert_eq!(reports.len(), LAYER_KINDS.len());
        for r in &reports {
            assert!(r.pass, "{}", r.line());
            assert!(r.gradients_checked > 0);
        }
    }

    /// A composite conv block (conv -> bn -> relu -> pool -> gap -> dense)
    /// backpropagates correctly end to end.
    #[test]
    fn composite_block_matches_fd() {
        let spec = NetSpec {
            branches: vec![vec![
                LayerSpec::Conv3x3 {
                    in_channels: 2,
                    out_channels: 3,
                },
                LayerSpec::BatchNorm {
                    features: 3,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::GlobalAvgPool,
            ]],
            trunk: vec![LayerSpec::Dense {
                in_features: 3,
                out_features: 4,
            }],
        };
        let net0: Network<f64> = spec.build(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_vec(
            [2, 2, 4, 4],
            (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let r: Vec<f64> = (0..8).map(|_| rng.gen_range(0.5..1.5)).collect();

        let mut net_a = net0.clone();
        let y = net_a.forward(&[input.clone()], Mode::Train).unwrap();
        let dy = Tensor::from_vec(y.shape(), r.clone());
        let input_grads = net_a.backward(&dy).unwrap();
        let analytic = collect_param_grads(&mut net_a);

        let mut max_err = 0.0f64;
        for flat in 0..analytic.len() {
            let mut hi = net0.clone();
            perturb_param(&mut hi, flat, FD_EPSILON);
            let mut lo = net0.clone();
            perturb_param(&mut lo, flat, -FD_EPSILON);
            let numeric = (forward_loss(&hi, &[input.clone()], &r).unwrap()
                - forward_loss(&lo, &[input.clone()], &r).unwrap())
                / (2.0 * FD_EPSILON);
            max_err = max_err.max(rel_err(analytic[flat], numeric));
        }
        for i in 0..input.len() {
            let mut hi = input.clone();
            hi.data[i] += FD_EPSILON;
            let mut lo = input.clone();
            lo.data[i] -= FD_EPSILON;
            let numeric = (forward_loss(&net0, &[hi], &r).unwrap()
                - forward_loss(&net0, &[lo], &r).unwrap())
                / (2.0 * FD_EPSILON);
            max_err = max_err.max(rel_err(input_grads[0].data[i], numeric));
        }
        assert!(max_err < FD_TOLERANCE, "max rel err {max_err}");
    }

    use rand::{Rng as _, SeedableRng as _};
}
