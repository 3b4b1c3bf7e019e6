//! Shared finite-difference harness for the oracle suites: central
//! differences, step 1e-4, double precision, relative error
//! |analytic - fd| / (|analytic| + 1e-8) bounded by 1e-5. Non-scalar
//! outputs are reduced through a fixed random weighted sum so every output
//! element influences the objective.

#![allow(dead_code)]

use coreg::regnet::{integrate_svf, FieldResolution};
use coreg::rng::{derive1, Stream};
use coreg::tensor::{GridDims, ResizeFactor, Tape, TensorId, Value};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-5;

pub type Build = dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId;

pub fn forward(inputs: &[Value<f64>], build: &Build) -> f64 {
    let mut t = Tape::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|v| t.leaf(v.clone(), false).unwrap())
        .collect();
    let y = build(&mut t, &ids);
    t.scalar(y)
}

pub fn analytic(inputs: &[Value<f64>], build: &Build) -> Vec<Vec<f64>> {
    let mut t = Tape::<f64>::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|v| t.leaf(v.clone(), true).unwrap())
        .collect();
    let y = build(&mut t, &ids);
    t.backward(y).unwrap();
    ids.iter().map(|&id| t.grad(id).unwrap().to_vec()).collect()
}

/// Worst relative error across every element of every input.
pub fn worst_rel_err(inputs: &[Value<f64>], build: &Build) -> f64 {
    let grads = analytic(inputs, build);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let fd = (forward(&plus, build) - forward(&minus, build)) / (2.0 * STEP);
            let rel = (g[j] - fd).abs() / (g[j].abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn assert_grads(
    name: &str,
    inputs: &[Value<f64>],
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId + 'static,
) {
    let err = worst_rel_err(inputs, &build);
    assert!(err < TOL, "{name}: worst relative error {err:.3e} >= {TOL:.0e}");
}

pub fn rng_for(counter: u64) -> ChaCha8Rng {
    derive1(20260815, Stream::GradCheck, counter)
}

pub fn random_value(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Value<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Value::new(dims, data).unwrap()
}

/// Values bounded away from zero, for kinked or singular ops.
pub fn random_value_away_from(dims: Vec<usize>, margin: f64, rng: &mut ChaCha8Rng) -> Value<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(margin..1.0)
        })
        .collect();
    Value::new(dims, data).unwrap()
}

/// Reduces an arbitrary op output to a scalar through fixed random weights.
pub fn weighted_sum(t: &mut Tape<f64>, out: TensorId, counter: u64) -> TensorId {
    let mut rng = rng_for(1_000_000 + counter);
    let dims = t.dims(out).to_vec();
    let n: usize = dims.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.5)
        })
        .collect();
    let wid = t.constant(Value::new(dims, w).unwrap()).unwrap();
    let prod = t.mul(out, wid).unwrap();
    t.sum_all(prod).unwrap()
}

/// Separable Gaussian blur with replicated borders, one channel at a time.
pub fn gaussian_blur(v: &Value<f64>, sigma: f64) -> Value<f64> {
    let gd = v.grid_dims().unwrap();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= norm;
    }
    let ext = [gd.w as isize, gd.h as isize, gd.d as isize];
    let mut cur = v.data().to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..gd.d as isize {
            for y in 0..gd.h as isize {
                for x in 0..gd.w as isize {
                    for c in 0..gd.c {
                        let mut acc = 0.0;
                        for (k, wgt) in kernel.iter().enumerate() {
                            let off = k as isize - radius;
                            let mut p = [x, y, z];
                            p[axis] = (p[axis] + off).clamp(0, ext[axis] - 1);
                            acc += wgt * cur[gd.at(c, p[0] as usize, p[1] as usize, p[2] as usize)];
                        }
                        next[gd.at(c, x as usize, y as usize, z as usize)] = acc;
                    }
                }
            }
        }
        cur = next;
    }
    Value::new(vec![gd.d, gd.h, gd.w, gd.c], cur).unwrap()
}

/// Random velocity drawn as white noise at half the target extent, smoothed
/// with a Gaussian of two voxels, doubled up to the target, then rescaled to
/// the requested max-norm.
pub fn smooth_velocity(target: [usize; 3], max_abs: f64, rng: &mut ChaCha8Rng) -> Value<f64> {
    let coarse = GridDims::new(3, target[0] / 2, target[1] / 2, target[2] / 2);
    let mut v = Value::grid(coarse);
    for x in v.data_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    let blurred = gaussian_blur(&v, 2.0);
    let mut t = Tape::<f64>::new();
    let id = t.leaf(blurred, false).unwrap();
    let up = t.resize_trilinear(id, [ResizeFactor::Double; 3]).unwrap();
    let data = t.value(up).data();
    let peak = data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let scale = max_abs / peak;
    Value::new(t.dims(up).to_vec(), data.iter().map(|&x| x * scale).collect()).unwrap()
}

/// Max |a - b| over voxels at least `margin` from every face.
pub fn interior_max_diff(a: &Value<f64>, b: &Value<f64>, margin: usize) -> f64 {
    let gd = a.grid_dims().unwrap();
    let mut worst = 0.0f64;
    for zz in margin..gd.d - margin {
        for y in margin..gd.h - margin {
            for x in margin..gd.w - margin {
                for c in 0..gd.c {
                    let i = gd.at(c, x, y, zz);
                    worst = worst.max((a.data()[i] - b.data()[i]).abs());
                }
            }
        }
    }
    worst
}

pub fn integrate_values(z: &Value<f64>, steps: u32) -> Value<f64> {
    let mut t = Tape::<f64>::new();
    let id = t.leaf(z.clone(), false).unwrap();
    let field = integrate_svf(&mut t, id, steps, FieldResolution::Half).unwrap();
    Value::new(t.dims(field.disp).to_vec(), t.value(field.disp).data().to_vec()).unwrap()
}
