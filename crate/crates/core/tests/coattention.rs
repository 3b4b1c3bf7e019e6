//! Frozen oracles for the cross-volume attention block: an explicit
//! per-voxel loop re-derivation of every line of the block on a 2x2x2
//! grid, exact reductions at alpha = 0, symmetry under tied weights, and
//! permutation equivariance of the flattening order.

mod common;

use common::{assert_grads, rng_for, weighted_sum};
use coreg::coattention::{co_attention_forward, CoAttentionParams, TapedCoAttention};
use coreg::params::TapedConv;
use coreg::tensor::{GridDims, Tape, TensorId, Value};
use coreg::Error;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn grid_value(gd: GridDims, rng: &mut ChaCha8Rng) -> Value<f64> {
    let mut v = Value::grid(gd);
    for x in v.data_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    v
}

/// Per-voxel 1x1x1 convolution, returning rows indexed by the flattened
/// voxel order n = x + W*(y + H*z).
fn conv1x1_host(feat: &Value<f64>, w: &Value<f64>, b: &Value<f64>) -> Vec<Vec<f64>> {
    let gd = feat.grid_dims().unwrap();
    let c_in = gd.c;
    let c_out = b.numel();
    let n = gd.voxels();
    let mut rows = vec![vec![0.0f64; c_out]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        for (co, out) in row.iter_mut().enumerate() {
            let mut acc = b.data()[co];
            for ci in 0..c_in {
                acc += w.data()[co * c_in + ci] * feat.data()[ci + c_in * i];
            }
            *out = acc;
        }
    }
    rows
}

fn softmax_rows(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    s.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.iter().map(|&x| x / sum).collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn forward_once(
    params: &CoAttentionParams<f64>,
    feat_mov: &Value<f64>,
    feat_fix: &Value<f64>,
) -> (Tape<f64>, coreg::coattention::CoAttentionOutput) {
    let mut t = Tape::<f64>::new();
    let m = t.leaf(feat_mov.clone(), false).unwrap();
    let f = t.leaf(feat_fix.clone(), false).unwrap();
    let taped = params.push(&mut t, false).unwrap();
    let out = co_attention_forward(&mut t, &taped, m, f).unwrap();
    (t, out)
}

#[test]
fn alpha_zero_bypasses_attention_bitwise() {
    let mut rng = rng_for(400);
    let gd = GridDims::new(3, 3, 2, 2);
    let params = CoAttentionParams::<f64>::init(3, 4, &mut rng);
    assert_eq!(params.alpha_mov.data(), &[0.0]);
    let feat_mov = grid_value(gd, &mut rng);
    let feat_fix = grid_value(gd, &mut rng);
    let (t, out) = forward_once(&params, &feat_mov, &feat_fix);

    let mut reference = Tape::<f64>::new();
    let m = reference.leaf(feat_mov, false).unwrap();
    let f = reference.leaf(feat_fix, false).unwrap();
    let h1 = params.h1.push(&mut reference, false).unwrap();
    let h2 = params.h2.push(&mut reference, false).unwrap();
    let h1m = reference
        .conv3d(m, h1.weight, h1.bias, [1, 1, 1], coreg::tensor::Padding::Same)
        .unwrap();
    let h2f = reference
        .conv3d(f, h2.weight, h2.bias, [1, 1, 1], coreg::tensor::Padding::Same)
        .unwrap();

    for (got, want) in [(out.o_mov, h1m), (out.o_fix, h2f)] {
        let got = t.value(got).data();
        let want = reference.value(want).data();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(want) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn tied_weights_and_inputs_symmetrize_the_block() {
    let mut rng = rng_for(401);
    let gd = GridDims::new(2, 2, 2, 2);
    let mut params = CoAttentionParams::<f64>::init(2, 3, &mut rng);
    params.g = params.f.clone();
    params.h2 = params.h1.clone();
    params.gate_fix = params.gate_mov.clone();
    params.alpha_mov.data_mut()[0] = 0.7;
    params.alpha_fix.data_mut()[0] = 0.7;
    let feat = grid_value(gd, &mut rng);
    let (t, out) = forward_once(&params, &feat, &feat);

    let n = gd.voxels();
    let s = t.value(out.s).data();
    assert_eq!(t.dims(out.s), &[n, n]);
    for i in 0..n {
        for j in 0..n {
            assert!(
                (s[i * n + j] - s[j * n + i]).abs() < 1e-12,
                "similarity not symmetric at ({i},{j})"
            );
        }
    }
    let am = t.value(out.att_mov).data();
    let af = t.value(out.att_fix).data();
    for (a, b) in am.iter().zip(af) {
        assert!((a - b).abs() < 1e-12);
    }
    let om = t.value(out.o_mov).data();
    let of = t.value(out.o_fix).data();
    for (a, b) in om.iter().zip(of) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loop_oracle_recomputes_every_line_on_a_two_cube() {
    let mut rng = rng_for(402);
    let gd = GridDims::new(4, 2, 2, 2);
    let mut params = CoAttentionParams::<f64>::init(4, 3, &mut rng);
    params.alpha_mov.data_mut()[0] = 0.9;
    params.alpha_fix.data_mut()[0] = -0.4;
    let feat_mov = grid_value(gd, &mut rng);
    let feat_fix = grid_value(gd, &mut rng);
    let (t, out) = forward_once(&params, &feat_mov, &feat_fix);

    let n = gd.voxels();
    let c_att = 3;
    assert_eq!(t.dims(out.s), &[n, n]);
    assert_eq!(t.dims(out.o_mov), &[2, 2, 2, c_att]);
    assert_eq!(t.dims(out.o_fix), &[2, 2, 2, c_att]);
    assert_eq!(t.dims(out.att_mov), &[2, 2, 2, c_att]);

    let fm = conv1x1_host(&feat_mov, &params.f.weight, &params.f.bias);
    let gf = conv1x1_host(&feat_fix, &params.g.weight, &params.g.bias);
    let h1m = conv1x1_host(&feat_mov, &params.h1.weight, &params.h1.bias);
    let h2f = conv1x1_host(&feat_fix, &params.h2.weight, &params.h2.bias);

    let mut s = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = (0..c_att).map(|c| fm[i][c] * gf[j][c]).sum();
        }
    }
    let got_s = t.value(out.s).data();
    for i in 0..n {
        for j in 0..n {
            assert!((got_s[i * n + j] - s[i][j]).abs() < 1e-12);
        }
    }

    let p_mov = softmax_rows(&s);
    let mut s_t = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            s_t[i][j] = s[j][i];
        }
    }
    let p_fix = softmax_rows(&s_t);
    for row in &p_mov {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    let weighted = |p: &[Vec<f64>], h: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..c_att)
                    .map(|c| (0..n).map(|j| p[i][j] * h[j][c]).sum())
                    .collect()
            })
            .collect()
    };
    let att_mov = weighted(&p_mov, &h2f);
    let att_fix = weighted(&p_fix, &h1m);
    let got_am = t.value(out.att_mov).data();
    let got_af = t.value(out.att_fix).data();
    for i in 0..n {
        for c in 0..c_att {
            assert!((got_am[c + c_att * i] - att_mov[i][c]).abs() < 1e-12);
            assert!((got_af[c + c_att * i] - att_fix[i][c]).abs() < 1e-12);
        }
    }

    let gate = |att: &[Vec<f64>], w: &Value<f64>, b: &Value<f64>| -> Vec<Vec<f64>> {
        att.iter()
            .map(|row| {
                (0..c_att)
                    .map(|co| {
                        let mut acc = b.data()[co];
                        for ci in 0..c_att {
                            acc += w.data()[co * c_att + ci] * row[ci];
                        }
                        sigmoid(acc)
                    })
                    .collect()
            })
            .collect()
    };
    let gm = gate(&att_mov, &params.gate_mov.weight, &params.gate_mov.bias);
    let gfx = gate(&att_fix, &params.gate_fix.weight, &params.gate_fix.bias);
    let got_gm = t.value(out.gate_mov).data();
    let got_om = t.value(out.o_mov).data();
    let got_of = t.value(out.o_fix).data();
    for i in 0..n {
        for c in 0..c_att {
            assert!((got_gm[c + c_att * i] - gm[i][c]).abs() < 1e-12);
            let o_mov = h1m[i][c] + 0.9 * gm[i][c] * h1m[i][c];
            let o_fix = h2f[i][c] + -0.4 * gfx[i][c] * h2f[i][c];
            assert!((got_om[c + c_att * i] - o_mov).abs() < 1e-12);
            assert!((got_of[c + c_att * i] - o_fix).abs() < 1e-12);
        }
    }
}

#[test]
fn consistent_permutation_permutes_outputs() {
    let mut rng = rng_for(403);
    let gd = GridDims::new(2, 3, 2, 2);
    let n = gd.voxels();
    let mut params = CoAttentionParams::<f64>::init(2, 2, &mut rng);
    params.alpha_mov.data_mut()[0] = 0.8;
    params.alpha_fix.data_mut()[0] = 0.5;
    let feat_mov = grid_value(gd, &mut rng);
    let feat_fix = grid_value(gd, &mut rng);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let permute = |v: &Value<f64>| -> Value<f64> {
        let c = v.grid_dims().unwrap().c;
        let mut out = v.clone();
        for (i, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                out.data_mut()[ch + c * i] = v.data()[ch + c * src];
            }
        }
        out
    };

    let (t0, base) = forward_once(&params, &feat_mov, &feat_fix);
    let (t1, moved) = forward_once(&params, &permute(&feat_mov), &permute(&feat_fix));

    let s0 = t0.value(base.s).data();
    let s1 = t1.value(moved.s).data();
    for i in 0..n {
        for j in 0..n {
            assert!((s1[i * n + j] - s0[perm[i] * n + perm[j]]).abs() < 1e-12);
        }
    }
    for (a, b) in [(base.o_mov, moved.o_mov), (base.o_fix, moved.o_fix)] {
        let want = t0.value(a).data();
        let got = t1.value(b).data();
        let c = 2;
        for (i, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                assert!((got[ch + c * i] - want[ch + c * src]).abs() < 1e-12);
            }
        }
    }
}

fn gradient_probe(alpha: f64) -> Vec<(String, bool)> {
    let mut rng = rng_for(404);
    let gd = GridDims::new(2, 2, 2, 2);
    let mut params = CoAttentionParams::<f64>::init(2, 2, &mut rng);
    params.alpha_mov.data_mut()[0] = alpha;
    params.alpha_fix.data_mut()[0] = alpha;
    let feat_mov = grid_value(gd, &mut rng);
    let feat_fix = grid_value(gd, &mut rng);

    let mut t = Tape::<f64>::new();
    let m = t.leaf(feat_mov, false).unwrap();
    let f = t.leaf(feat_fix, false).unwrap();
    let mut ids: Vec<(String, TensorId)> = Vec::new();
    let taped = params.push(&mut t, true).unwrap();
    params.visit("coatt", &mut |name, _| {
        ids.push((name.to_string(), TensorId::default()));
    });
    for ((_, slot), id) in ids.iter_mut().zip(taped.leaf_ids()) {
        *slot = id;
    }
    let out = co_attention_forward(&mut t, &taped, m, f).unwrap();
    let sq_m = t.mul(out.o_mov, out.o_mov).unwrap();
    let sq_f = t.mul(out.o_fix, out.o_fix).unwrap();
    let lm = t.sum_all(sq_m).unwrap();
    let lf = t.sum_all(sq_f).unwrap();
    let loss = t.add(lm, lf).unwrap();
    t.backward(loss).unwrap();
    ids.iter()
        .map(|(name, id)| {
            let live = t.grad(*id).unwrap().iter().any(|&g| g != 0.0);
            (name.clone(), live)
        })
        .collect()
}

#[test]
fn gradients_reach_every_parameter_when_attention_is_blended() {
    for (name, live) in gradient_probe(0.3) {
        assert!(live, "{name} received no gradient at alpha = 0.3");
    }
}

#[test]
fn cold_start_gradients_flow_only_through_direct_paths() {
    for (name, live) in gradient_probe(0.0) {
        let direct = name.contains(".h1.")
            || name.contains(".h2.")
            || name.ends_with("alpha_mov")
            || name.ends_with("alpha_fix");
        if direct {
            assert!(live, "{name} should still learn at alpha = 0");
        } else {
            assert!(!live, "{name} should be gradient-free at alpha = 0");
        }
    }
}

#[test]
fn budget_and_shape_violations_are_rejected() {
    let mut rng = rng_for(405);
    let params = CoAttentionParams::<f64>::init(1, 1, &mut rng);
    let mut t = Tape::<f64>::new();
    let big = GridDims::new(1, 32, 32, 9);
    let m = t.leaf(Value::grid(big), false).unwrap();
    let f = t.leaf(Value::grid(big), false).unwrap();
    let taped = params.push(&mut t, false).unwrap();
    match co_attention_forward(&mut t, &taped, m, f) {
        Err(Error::Resource(msg)) => assert!(msg.contains("9216")),
        other => panic!("expected resource error, got {other:?}"),
    }

    let mut t = Tape::<f64>::new();
    let m = t.leaf(Value::grid(GridDims::new(1, 2, 2, 2)), false).unwrap();
    let f = t.leaf(Value::grid(GridDims::new(1, 3, 2, 2)), false).unwrap();
    let taped = params.push(&mut t, false).unwrap();
    assert!(matches!(co_attention_forward(&mut t, &taped, m, f), Err(Error::Shape(_))));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let mut rng = rng_for(406);
    let gd = GridDims::new(2, 2, 2, 2);
    let mut inputs = vec![grid_value(gd, &mut rng), grid_value(gd, &mut rng)];
    let params = CoAttentionParams::<f64>::init(2, 2, &mut rng);
    params.visit("p", &mut |_, v| inputs.push(v.clone()));
    inputs[14] = Value::scalar(0.6);
    inputs[15] = Value::scalar(-0.3);

    assert_grads("co_attention_forward", &inputs, |t, ids| {
        let conv = |w: usize| TapedConv { weight: ids[w], bias: ids[w + 1] };
        let taped = TapedCoAttention {
            f: conv(2),
            g: conv(4),
            h1: conv(6),
            h2: conv(8),
            gate_mov: conv(10),
            gate_fix: conv(12),
            alpha_mov: ids[14],
            alpha_fix: ids[15],
        };
        let out = co_attention_forward(t, &taped, ids[0], ids[1]).unwrap();
        let wm = weighted_sum(t, out.o_mov, 77);
        let wf = weighted_sum(t, out.o_fix, 78);
        t.add(wm, wf).unwrap()
    });
}
