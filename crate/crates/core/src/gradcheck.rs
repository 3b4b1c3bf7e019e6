//! Runtime gradient verification: central differences (step 1e-4, f64)
//! against the tape's backward pass, op by op plus an end-to-end network.
//! Inputs for kinked ops are drawn away from their kinks, and the tiny
//! end-to-end net gets fractional head biases so no warp position sits on
//! the trilinear lattice where two-sided differences straddle a corner.
//!
//! The difference quotient carries roundoff of order eps*|loss|/step no
//! matter how correct the gradient is, so the reported error is the
//! discrepancy beyond that floor, relative to the analytic magnitude.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::coattention::{co_attention_forward, CoAttentionParams, TapedCoAttention};
use crate::losses::{kl_loss, ncc_loss, total_loss, LossWeights};
use crate::params::TapedConv;
use crate::regnet::{
    register_pair, AttentionPath, FlowDistribution, NetworkConfig, RegNetParams, SampleMode,
};
use crate::rng::{derive1, Stream};
use crate::tensor::{GridDims, KernelDims, OpKind, Padding, ResizeFactor, Tape, TensorId, Value};
use crate::{Error, Result};

const STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;
/// Headroom over one ulp for roundoff accumulated across the whole graph.
const NOISE_KAPPA: f64 = 64.0;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub worst_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect()
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>;

fn forward(inputs: &[Value<f64>], build: &Build, perturb: Option<OpKind>) -> Result<f64> {
    let mut t = Tape::<f64>::new();
    t.set_backward_perturbation(perturb);
    let ids: Vec<TensorId> =
        inputs.iter().map(|v| t.leaf(v.clone(), false)).collect::<Result<_>>()?;
    let y = build(&mut t, &ids)?;
    Ok(t.scalar(y))
}

fn analytic(
    inputs: &[Value<f64>],
    build: &Build,
    perturb: Option<OpKind>,
) -> Result<Vec<Vec<f64>>> {
    let mut t = Tape::<f64>::new();
    t.set_backward_perturbation(perturb);
    let ids: Vec<TensorId> =
        inputs.iter().map(|v| t.leaf(v.clone(), true)).collect::<Result<_>>()?;
    let y = build(&mut t, &ids)?;
    t.backward(y)?;
    ids.iter().map(|&id| Ok(t.grad(id)?.to_vec())).collect()
}

/// Discrepancy beyond the difference quotient's roundoff floor, relative to
/// the analytic magnitude. `lp`/`lm` are the two loss evaluations.
fn rel_err(a: f64, fd: f64, lp: f64, lm: f64) -> f64 {
    let noise = NOISE_KAPPA * f64::EPSILON * lp.abs().max(lm.abs()).max(1.0) / (2.0 * STEP);
    ((a - fd).abs() - noise).max(0.0) / (a.abs() + REL_FLOOR)
}

/// Full central-difference sweep over every element of every input.
fn worst_rel_err(
    inputs: &[Value<f64>],
    build: &Build,
    perturb: Option<OpKind>,
) -> Result<f64> {
    let grads = analytic(inputs, build, perturb)?;
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let lp = forward(&plus, build, perturb)?;
            let lm = forward(&minus, build, perturb)?;
            let fd = (lp - lm) / (2.0 * STEP);
            worst = worst.max(rel_err(g[j], fd, lp, lm));
        }
    }
    Ok(worst)
}

fn uniform_value(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Value<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Value::new(dims, data).expect("literal dims")
}

/// Signed values bounded away from zero, for kinked ops.
fn off_zero_value(dims: Vec<usize>, margin: f64, rng: &mut ChaCha8Rng) -> Value<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(margin..1.0)
        })
        .collect();
    Value::new(dims, data).expect("literal dims")
}

/// Reduce through fixed random weights so every output element matters.
fn reduce(t: &mut Tape<f64>, out: TensorId, w: &Value<f64>) -> Result<TensorId> {
    let wid = t.constant(w.clone())?;
    let prod = t.mul(out, wid)?;
    t.sum_all(prod)
}

fn reduction_weights(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Value<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.5)
        })
        .collect();
    Value::new(dims, data).expect("literal dims")
}

struct Check {
    name: &'static str,
    inputs: Vec<Value<f64>>,
    build: Box<Build>,
}

fn matmul_check(rng: &mut ChaCha8Rng) -> Check {
    let a = uniform_value(vec![3, 4], -1.0, 1.0, rng);
    let b = uniform_value(vec![4, 2], -1.0, 1.0, rng);
    let w = reduction_weights(vec![3, 2], rng);
    Check {
        name: "matmul",
        inputs: vec![a, b],
        build: Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            reduce(t, y, &w)
        }),
    }
}

fn softmax_check(rng: &mut ChaCha8Rng) -> Check {
    let x = uniform_value(vec![3, 5], -2.0, 2.0, rng);
    let w = reduction_weights(vec![3, 5], rng);
    Check {
        name: "softmax",
        inputs: vec![x],
        build: Box::new(move |t, ids| {
            let y = t.softmax(ids[0])?;
            reduce(t, y, &w)
        }),
    }
}

fn conv3d_check(rng: &mut ChaCha8Rng) -> Check {
    let vol = uniform_value(GridDims::new(2, 4, 4, 2).dims(), -1.0, 1.0, rng);
    let kernel = uniform_value(
        Value::<f64>::kernel(KernelDims { c_out: 2, c_in: 2, kx: 3, ky: 3, kz: 3 })
            .dims()
            .to_vec(),
        -0.5,
        0.5,
        rng,
    );
    let bias = uniform_value(vec![2], -0.5, 0.5, rng);
    let w = reduction_weights(GridDims::new(2, 2, 2, 2).dims(), rng);
    Check {
        name: "conv3d",
        inputs: vec![vol, kernel, bias],
        build: Box::new(move |t, ids| {
            let y = t.conv3d(ids[0], ids[1], ids[2], [2, 2, 1], Padding::Same)?;
            reduce(t, y, &w)
        }),
    }
}

fn grid_sample_check(rng: &mut ChaCha8Rng) -> Check {
    let vol = uniform_value(GridDims::new(2, 4, 4, 3).dims(), -1.0, 1.0, rng);
    // Negative fractional offsets: off the lattice everywhere, and border
    // voxels land deep inside the clamp's flat region, not on its corner.
    let disp = uniform_value(GridDims::new(3, 4, 4, 3).dims(), -0.35, -0.15, rng);
    let w = reduction_weights(GridDims::new(2, 4, 4, 3).dims(), rng);
    Check {
        name: "grid_sample",
        inputs: vec![vol, disp],
        build: Box::new(move |t, ids| {
            let y = t.grid_sample(ids[0], ids[1])?;
            reduce(t, y, &w)
        }),
    }
}

fn resize_check(rng: &mut ChaCha8Rng) -> Check {
    let vol = uniform_value(GridDims::new(2, 4, 4, 2).dims(), -1.0, 1.0, rng);
    let w = reduction_weights(GridDims::new(2, 8, 2, 2).dims(), rng);
    Check {
        name: "resize_trilinear",
        inputs: vec![vol],
        build: Box::new(move |t, ids| {
            let y = t.resize_trilinear(
                ids[0],
                [ResizeFactor::Double, ResizeFactor::Half, ResizeFactor::Same],
            )?;
            reduce(t, y, &w)
        }),
    }
}

fn sigmoid_check(rng: &mut ChaCha8Rng) -> Check {
    let x = uniform_value(vec![4, 3], -3.0, 3.0, rng);
    let w = reduction_weights(vec![4, 3], rng);
    Check {
        name: "sigmoid",
        inputs: vec![x],
        build: Box::new(move |t, ids| {
            let y = t.sigmoid(ids[0])?;
            reduce(t, y, &w)
        }),
    }
}

fn leaky_relu_check(rng: &mut ChaCha8Rng) -> Check {
    let x = off_zero_value(vec![4, 5], 0.1, rng);
    let w = reduction_weights(vec![4, 5], rng);
    Check {
        name: "leaky_relu",
        inputs: vec![x],
        build: Box::new(move |t, ids| {
            let y = t.leaky_relu(ids[0], 0.2)?;
            reduce(t, y, &w)
        }),
    }
}

fn ncc_check(rng: &mut ChaCha8Rng) -> Check {
    let a = uniform_value(GridDims::new(1, 4, 4, 3).dims(), 0.0, 1.0, rng);
    let b = uniform_value(GridDims::new(1, 4, 4, 3).dims(), 0.0, 1.0, rng);
    Check {
        name: "ncc_loss",
        inputs: vec![a, b],
        build: Box::new(move |t, ids| Ok(ncc_loss(t, ids[0], ids[1])?.loss)),
    }
}

fn kl_check(rng: &mut ChaCha8Rng) -> Check {
    let mu = uniform_value(GridDims::new(3, 3, 2, 2).dims(), -1.0, 1.0, rng);
    // Log-variances well inside the clamp window.
    let log_var = uniform_value(GridDims::new(3, 3, 2, 2).dims(), -1.7, 1.1, rng);
    Check {
        name: "kl_loss",
        inputs: vec![mu, log_var],
        build: Box::new(move |t, ids| {
            let dist = FlowDistribution::new(t, ids[0], ids[1])?;
            kl_loss(t, &dist, 10.0)
        }),
    }
}

fn coattention_check(rng: &mut ChaCha8Rng) -> Check {
    let (c_in, c_att) = (4, 3);
    let mut params = CoAttentionParams::<f64>::init(c_in, c_att, rng);
    // Nonzero blends so the exchange path carries gradient.
    params.alpha_mov.data_mut()[0] = 0.35;
    params.alpha_fix.data_mut()[0] = -0.25;
    let mut inputs: Vec<Value<f64>> = Vec::new();
    params.visit("c", &mut |_, v| inputs.push(v.clone()));
    let gd = GridDims::new(c_in, 3, 2, 2);
    inputs.push(uniform_value(gd.dims(), -1.0, 1.0, rng));
    inputs.push(uniform_value(gd.dims(), -1.0, 1.0, rng));
    let out_dims = GridDims::new(c_att, 3, 2, 2).dims();
    let w_mov = reduction_weights(out_dims.clone(), rng);
    let w_fix = reduction_weights(out_dims, rng);
    Check {
        name: "co_attention_forward",
        inputs,
        build: Box::new(move |t, ids| {
            let taped = TapedCoAttention {
                f: TapedConv { weight: ids[0], bias: ids[1] },
                g: TapedConv { weight: ids[2], bias: ids[3] },
                h1: TapedConv { weight: ids[4], bias: ids[5] },
                h2: TapedConv { weight: ids[6], bias: ids[7] },
                gate_mov: TapedConv { weight: ids[8], bias: ids[9] },
                gate_fix: TapedConv { weight: ids[10], bias: ids[11] },
                alpha_mov: ids[12],
                alpha_fix: ids[13],
            };
            let out = co_attention_forward(t, &taped, ids[14], ids[15])?;
            let a = reduce(t, out.o_mov, &w_mov)?;
            let b = reduce(t, out.o_fix, &w_fix)?;
            t.add(a, b)
        }),
    }
}

fn tiny_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        in_shape: [8, 8, 4],
        stem_channels: [2, 4],
        att_channels: 4,
        unet_depth: 1,
        unet_channels: vec![4],
        integration_steps: 2,
        seed,
    }
}

/// Fresh heads put every warp position exactly on the lattice, where the
/// trilinear kernel has corners and two-sided differences lie. Shift the
/// flow to ~0.7 voxels with mild spatial variation instead, and blend the
/// attention exchange in so its convolutions carry gradient.
fn off_lattice_params(seed: u64) -> Result<RegNetParams<f64>> {
    let mut params = RegNetParams::<f64>::init(&tiny_config(seed))?;
    let mut rng = derive1(seed, Stream::GradCheck, 90);
    params.mu_head.weight.fill_std_normal(&mut rng, 0.01);
    params.mu_head.bias.data_mut().copy_from_slice(&[0.35, -0.3, 0.3]);
    params.log_var_head.weight.fill_std_normal(&mut rng, 0.01);
    for b in params.log_var_head.bias.data_mut() {
        *b = -2.0;
    }
    params.coatt.alpha_mov.data_mut()[0] = 0.3;
    params.coatt.alpha_fix.data_mut()[0] = -0.25;
    Ok(params)
}

fn e2e_loss(
    params: &RegNetParams<f64>,
    moving: &Value<f64>,
    fixed: &Value<f64>,
    perturb: Option<OpKind>,
    trainable: bool,
) -> Result<(Tape<f64>, TensorId, Vec<TensorId>)> {
    let mut tape = Tape::<f64>::new();
    tape.set_backward_perturbation(perturb);
    let net = params.push(&mut tape, trainable)?;
    let m = tape.constant(moving.clone())?;
    let f = tape.constant(fixed.clone())?;
    let mut unused = derive1(params.config.seed, Stream::GradCheck, 91);
    let reg = register_pair(
        &mut tape,
        &net,
        m,
        f,
        SampleMode::Mean,
        AttentionPath::Full,
        &mut unused,
    )?;
    let loss = total_loss(&mut tape, reg.warped, f, &reg.dist, &LossWeights::default())?;
    let ids = net.leaf_ids();
    Ok((tape, loss.total, ids))
}

/// End-to-end check: for each parameter tensor, the analytic directional
/// derivative along a random sign vector against a central difference of the
/// full pipeline's loss. Directions aggregate the tensor's gradient mass, so
/// the comparison stays far above the difference quotient's noise floor even
/// where individual coordinates are ~1e-7.
fn end_to_end_worst(seed: u64, perturb: Option<OpKind>) -> Result<f64> {
    let params = off_lattice_params(seed)?;
    let mut rng = derive1(seed, Stream::GradCheck, 92);
    let gd = GridDims::new(1, 8, 8, 4);
    let moving = uniform_value(gd.dims(), 0.05, 0.95, &mut rng);
    let fixed = uniform_value(gd.dims(), 0.05, 0.95, &mut rng);

    let (mut tape, loss, ids) = e2e_loss(&params, &moving, &fixed, perturb, true)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| Ok(tape.grad(id)?.to_vec()))
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    for (tensor_idx, g) in grads.iter().enumerate() {
        let dir: Vec<f64> =
            (0..g.len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let analytic_dir: f64 = g.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let fd_at = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut i = 0;
            p.visit_mut(&mut |_, v| {
                if i == tensor_idx {
                    for (x, d) in v.data_mut().iter_mut().zip(&dir) {
                        *x += delta * d;
                    }
                }
                i += 1;
            });
            let (t, l, _) = e2e_loss(&p, &moving, &fixed, perturb, false)?;
            Ok(t.scalar(l))
        };
        let lp = fd_at(STEP)?;
        let lm = fd_at(-STEP)?;
        let fd = (lp - lm) / (2.0 * STEP);
        let err = rel_err(analytic_dir, fd, lp, lm);
        #[cfg(feature = "gradcheck-trace")]
        eprintln!(
            "e2e tensor {tensor_idx}: analytic {analytic_dir:.6e} fd {fd:.6e} rel {err:.3e}"
        );
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Run the whole suite. `perturb` scales the backward pass of one op kind,
/// proving the suite catches a wrong analytic gradient.
pub fn run_gradcheck(
    seed: u64,
    tol: f64,
    perturb: Option<OpKind>,
) -> Result<GradCheckReport> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::usage(format!("tolerance must be non-negative, got {tol}")));
    }
    let builders: [fn(&mut ChaCha8Rng) -> Check; 10] = [
        matmul_check,
        softmax_check,
        conv3d_check,
        grid_sample_check,
        resize_check,
        sigmoid_check,
        leaky_relu_check,
        ncc_check,
        kl_check,
        coattention_check,
    ];
    let mut checks = Vec::with_capacity(builders.len() + 1);
    for (k, make) in builders.iter().enumerate() {
        let mut rng = derive1(seed, Stream::GradCheck, k as u64);
        let check = make(&mut rng);
        let err = worst_rel_err(&check.inputs, &check.build, perturb)?;
        checks.push(OpCheck { name: check.name, worst_rel_err: err, pass: err < tol });
    }
    let err = end_to_end_worst(seed, perturb)?;
    checks.push(OpCheck { name: "end_to_end", worst_rel_err: err, pass: err < tol });
    Ok(GradCheckReport { tol, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_deadbands_roundoff_but_not_real_discrepancy() {
        assert_eq!(rel_err(0.0, 0.0, 1.0, 1.0), 0.0);
        let noise_floor = NOISE_KAPPA * f64::EPSILON / (2.0 * STEP);
        assert_eq!(rel_err(1e-6, 1e-6 + 0.5 * noise_floor, 1.0, 1.0), 0.0);
        assert!(rel_err(1.0, 2.0, 1.0, 1.0) > 0.9);
    }
}
