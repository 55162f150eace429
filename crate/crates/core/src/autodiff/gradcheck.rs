//! Central finite-difference verification of every primitive's gradients,
//! in 64-bit mode. Used by the test suite and exposed through the CLI.

use super::{AdError, NodeId, Tape, Tensor};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked_parameters: usize,
    /// (leaf index, element index, analytic, finite-difference) at the
    /// worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares tape gradients against central differences
/// `(f(x+eps) - f(x-eps)) / 2 eps` for every element of every leaf.
/// Relative error is `|analytic - fd| / (|analytic| + 1e-8)`.
///
/// An element that misses the tolerance at the primary step is re-measured
/// at `eps/8` and `8*eps` and scored by its best step: finite-difference
/// artifacts (kink crossings, curvature truncation, roundoff) move with the
/// step size, while a wrong backward formula fails at every step.
pub fn check_gradients<F>(
    name: &str,
    leaves: &[Tensor<f64>],
    build: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, AdError>,
{
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].len() {
            let original = work[li].data()[ei];
            let a = analytic[li].data()[ei];
            let mut measure = |eps: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64, AdError> {
                work[li].data_mut()[ei] = original + eps;
                let plus = eval(work)?;
                work[li].data_mut()[ei] = original - eps;
                let minus = eval(work)?;
                work[li].data_mut()[ei] = original;
                let fd = (plus - minus) / (2.0 * eps);
                Ok(fd)
            };
            let mut fd = measure(epsilon, &mut work)?;
            let mut rel = (a - fd).abs() / (a.abs() + 1e-8);
            if rel >= tolerance {
                for eps in [epsilon / 8.0, epsilon * 8.0] {
                    let fd2 = measure(eps, &mut work)?;
                    let rel2 = (a - fd2).abs() / (a.abs() + 1e-8);
                    if rel2 < rel {
                        rel = rel2;
                        fd = fd2;
                    }
                }
            }
            if rel > max_rel {
                max_rel = rel;
                worst = Some((li, ei, a, fd));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        checked_parameters: checked,
        worst,
    })
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| uniform(rng, -1.0, 1.0))
}

/// Random values bounded away from zero, for kinked ops (relu, max ties).
fn rand_tensor_offset(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = uniform(rng, min_abs, 1.0);
        if rng.next_u64() & 1 == 0 {
            v
        } else {
            -v
        }
    })
}

/// Fixed random projection weights turn any output into a scalar loss with
/// generically nonzero gradients everywhere.
fn project_to_scalar(
    tape: &mut Tape<f64>,
    out: NodeId,
    seed: u64,
) -> Result<NodeId, AdError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| uniform(&mut rng, 0.25, 1.0));
    tape.reduce_sum(out, Some(w))
}

/// The full primitive + composition gradient suite from one seed.
pub fn standard_suite(seed: u64) -> Vec<GradCheckReport> {
    let eps = DEFAULT_EPSILON;
    let tol = PRIMITIVE_TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |r: Result<GradCheckReport, AdError>| match r {
        Ok(rep) => reports.push(rep),
        Err(e) => reports.push(GradCheckReport {
            name: format!("build error: {e}"),
            max_rel_err: f64::INFINITY,
            tolerance: 0.0,
            checked_parameters: 0,
            worst: None,
        }),
    };

    use super::ConvSpec;

    // conv3d, plain
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    run(check_gradients(
        "conv3d k3 s1 p0",
        &[x, w, b],
        |t, ids| {
            let y = t.conv3d(ids[0], ids[1], Some(ids[2]), ConvSpec::unit())?;
            project_to_scalar(t, y, 11)
        },
        eps,
        tol,
    ));

    // conv3d, dilation 2 with padding 2
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    run(check_gradients(
        "conv3d k3 s1 p2 dil2",
        &[x, w, b],
        |t, ids| {
            let spec = ConvSpec { stride: 1, padding: 2, dilation: 2 };
            let y = t.conv3d(ids[0], ids[1], Some(ids[2]), spec)?;
            project_to_scalar(t, y, 12)
        },
        eps,
        tol,
    ));

    // conv3d, stride 2
    let x = rand_tensor(&mut rng, &[2, 1, 5, 5, 5]);
    let w = rand_tensor(&mut rng, &[2, 1, 3, 3, 3]);
    run(check_gradients(
        "conv3d k3 s2 p1",
        &[x, w],
        |t, ids| {
            let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
            let y = t.conv3d(ids[0], ids[1], None, spec)?;
            project_to_scalar(t, y, 13)
        },
        eps,
        tol,
    ));

    // conv3d_transpose, stride-2 upsampling (k4 p1)
    let x = rand_tensor(&mut rng, &[2, 3, 3, 2, 2]);
    let w = rand_tensor(&mut rng, &[3, 2, 4, 4, 4]);
    let b = rand_tensor(&mut rng, &[2]);
    run(check_gradients(
        "conv3d_transpose k4 s2 p1",
        &[x, w, b],
        |t, ids| {
            let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
            let y = t.conv3d_transpose(ids[0], ids[1], Some(ids[2]), spec)?;
            project_to_scalar(t, y, 14)
        },
        eps,
        tol,
    ));

    // conv3d_transpose, k3 p0 (checkerboard geometry)
    let x = rand_tensor(&mut rng, &[1, 2, 2, 2, 3]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    run(check_gradients(
        "conv3d_transpose k3 s2 p0",
        &[x, w],
        |t, ids| {
            let spec = ConvSpec { stride: 2, padding: 0, dilation: 1 };
            let y = t.conv3d_transpose(ids[0], ids[1], None, spec)?;
            project_to_scalar(t, y, 15)
        },
        eps,
        tol,
    ));

    // maxpool3d on tie-free data
    let x = Tensor::from_fn(&[2, 2, 4, 4, 4], |i| (i as f64) * 0.137 + uniform(&mut rng, -0.01, 0.01));
    run(check_gradients(
        "maxpool3d w2 s2",
        &[x],
        |t, ids| {
            let y = t.maxpool3d(ids[0], 2, 2)?;
            project_to_scalar(t, y, 16)
        },
        eps,
        tol,
    ));

    // batchnorm train mode (looser tolerance: variance chain)
    let x = rand_tensor(&mut rng, &[4, 3, 2, 2, 2]);
    let gamma = rand_tensor_offset(&mut rng, &[3], 0.5);
    let beta = rand_tensor(&mut rng, &[3]);
    run(check_gradients(
        "batchnorm train",
        &[x, gamma, beta],
        |t, ids| {
            let mut state = super::BnState::new(3);
            let y = t.batchnorm(ids[0], ids[1], ids[2], &mut state, super::BnMode::Train, 0.1, 1e-5)?;
            project_to_scalar(t, y, 17)
        },
        eps,
        COMPOSITION_TOLERANCE,
    ));

    // batchnorm eval mode
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
    let gamma = rand_tensor_offset(&mut rng, &[2], 0.5);
    let beta = rand_tensor(&mut rng, &[2]);
    run(check_gradients(
        "batchnorm eval",
        &[x, gamma, beta],
        |t, ids| {
            let mut state = super::BnState::new(2);
            state.running_mean = vec![0.3, -0.2];
            state.running_var = vec![1.4, 0.6];
            let y = t.batchnorm(ids[0], ids[1], ids[2], &mut state, super::BnMode::Eval, 0.1, 1e-5)?;
            project_to_scalar(t, y, 18)
        },
        eps,
        tol,
    ));

    // dropout train mode with pinned seed
    let x = rand_tensor(&mut rng, &[6, 7]);
    run(check_gradients(
        "dropout train",
        &[x],
        |t, ids| {
            let y = t.dropout(ids[0], 0.4, true, 99)?;
            project_to_scalar(t, y, 19)
        },
        eps,
        tol,
    ));

    // dense
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    let b = rand_tensor(&mut rng, &[2]);
    run(check_gradients(
        "dense",
        &[x, w, b],
        |t, ids| {
            let y = t.dense(ids[0], ids[1], Some(ids[2]))?;
            project_to_scalar(t, y, 20)
        },
        eps,
        tol,
    ));

    // relu away from the kink
    let x = rand_tensor_offset(&mut rng, &[4, 5], 0.05);
    run(check_gradients(
        "relu",
        &[x],
        |t, ids| {
            let y = t.relu(ids[0]);
            project_to_scalar(t, y, 21)
        },
        eps,
        tol,
    ));

    // sigmoid
    let x = rand_tensor(&mut rng, &[4, 5]);
    run(check_gradients(
        "sigmoid",
        &[x],
        |t, ids| {
            let y = t.sigmoid(ids[0]);
            project_to_scalar(t, y, 22)
        },
        eps,
        tol,
    ));

    // global average pool
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2, 3]);
    run(check_gradients(
        "global_avg_pool",
        &[x],
        |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            project_to_scalar(t, y, 23)
        },
        eps,
        tol,
    ));

    // channel max on tie-free data
    let x = Tensor::from_fn(&[2, 3, 2, 2, 2], |i| (i as f64) * 0.273 + uniform(&mut rng, -0.02, 0.02));
    run(check_gradients(
        "channel_max",
        &[x],
        |t, ids| {
            let y = t.channel_max(ids[0])?;
            project_to_scalar(t, y, 24)
        },
        eps,
        tol,
    ));

    // concat
    let a = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
    let b = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
    run(check_gradients(
        "concat",
        &[a, b],
        |t, ids| {
            let y = t.concat(&[ids[0], ids[1]])?;
            project_to_scalar(t, y, 25)
        },
        eps,
        tol,
    ));

    // elementwise maximum, broadcast add/mul, sub
    let a = rand_tensor_offset(&mut rng, &[3, 4], 0.05);
    let b = rand_tensor_offset(&mut rng, &[3, 4], 0.05);
    run(check_gradients(
        "maximum",
        &[a, b],
        |t, ids| {
            let y = t.maximum(ids[0], ids[1])?;
            project_to_scalar(t, y, 26)
        },
        eps,
        tol,
    ));
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 1, 4]);
    run(check_gradients(
        "add broadcast",
        &[a.clone(), b.clone()],
        |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            project_to_scalar(t, y, 27)
        },
        eps,
        tol,
    ));
    run(check_gradients(
        "mul broadcast",
        &[a, b],
        |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            project_to_scalar(t, y, 28)
        },
        eps,
        tol,
    ));
    let a = rand_tensor(&mut rng, &[5]);
    let b = rand_tensor(&mut rng, &[5]);
    run(check_gradients(
        "sub",
        &[a, b],
        |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            project_to_scalar(t, y, 29)
        },
        eps,
        tol,
    ));

    // weighted reductions
    let x = rand_tensor(&mut rng, &[7]);
    run(check_gradients(
        "reduce_sum weighted",
        &[x.clone()],
        |t, ids| {
            let w = Tensor::from_fn(&[7], |i| 0.5 + 0.25 * i as f64);
            t.reduce_sum(ids[0], Some(w))
        },
        eps,
        tol,
    ));
    run(check_gradients(
        "reduce_mean",
        &[x],
        |t, ids| t.reduce_mean(ids[0], None),
        eps,
        tol,
    ));

    // composed block: conv -> relu -> pool -> flatten -> dense
    let x = rand_tensor(&mut rng, &[2, 1, 4, 4, 4]);
    let w = rand_tensor(&mut rng, &[2, 1, 3, 3, 3]);
    let wd = rand_tensor(&mut rng, &[16, 2]);
    let bd = rand_tensor(&mut rng, &[2]);
    run(check_gradients(
        "composed conv-relu-pool-dense",
        &[x, w, wd, bd],
        |t, ids| {
            let spec = ConvSpec { stride: 1, padding: 1, dilation: 1 };
            let c = t.conv3d(ids[0], ids[1], None, spec)?;
            let r = t.relu(c);
            let p = t.maxpool3d(r, 2, 2)?;
            let f = t.flatten(p)?;
            let d = t.dense(f, ids[2], Some(ids[3]))?;
            project_to_scalar(t, d, 30)
        },
        eps,
        PRIMITIVE_TOLERANCE,
    ));

    reports
}
