//! Value-level oracles for the tensor ops: exact identities, hand-summed
//! reference values, and shape/range invariants under random inputs.

use coreg::tensor::{GridDims, KernelDims, Padding, ResizeFactor, Tape, Value};
use proptest::prelude::*;

fn tape() -> Tape<f64> {
    Tape::new()
}

#[test]
fn softmax_reference_rows() {
    let mut t = tape();
    let x = t
        .leaf(
            Value::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap(),
            false,
        )
        .unwrap();
    let y = t.softmax(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    let x2 = t
        .leaf(Value::new(vec![2], vec![0.0, (2.0f64).ln()]).unwrap(), false)
        .unwrap();
    let y2 = t.softmax(x2).unwrap();
    assert!((t.value(y2).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((t.value(y2).data()[1] - 2.0 / 3.0).abs() < 1e-12);

    // Shift invariance keeps huge inputs finite.
    let x3 = t
        .leaf(Value::new(vec![2], vec![1000.0, 1001.0]).unwrap(), false)
        .unwrap();
    let y3 = t.softmax(x3).unwrap();
    let x4 = t
        .leaf(Value::new(vec![2], vec![0.0, 1.0]).unwrap(), false)
        .unwrap();
    let y4 = t.softmax(x4).unwrap();
    for (a, b) in t.value(y3).data().iter().zip(t.value(y4).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_for_large_magnitudes(
        rows in proptest::collection::vec(
            proptest::collection::vec(-1e4f64..1e4, 4), 1..4)
    ) {
        let mut t = tape();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = t.leaf(Value::new(vec![rows.len(), 4], flat).unwrap(), false).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn elementwise_ops_preserve_shape(
        data in proptest::collection::vec(-3.0f64..3.0, 12)
    ) {
        let mut t = tape();
        let dims = vec![2, 3, 2, 1];
        let x = t.leaf(Value::new(dims.clone(), data).unwrap(), false).unwrap();
        for y in [
            t.add(x, x).unwrap(),
            t.mul(x, x).unwrap(),
            t.sigmoid(x).unwrap(),
            t.leaky_relu(x, 0.2).unwrap(),
        ] {
            prop_assert_eq!(t.dims(y), dims.as_slice());
        }
    }

    #[test]
    fn grid_sample_zero_displacement_is_bit_exact_identity(
        data in proptest::collection::vec(-10.0f64..10.0, 24)
    ) {
        let gd = GridDims::new(2, 3, 2, 2);
        let mut t = tape();
        let vol = t.leaf(Value::new(gd.dims(), data.clone()).unwrap(), false).unwrap();
        let disp = t.leaf(Value::zeros(GridDims::new(3, 3, 2, 2).dims()), false).unwrap();
        let out = t.grid_sample(vol, disp).unwrap();
        prop_assert_eq!(t.value(out).data(), data.as_slice());
    }

    #[test]
    fn conv3d_identity_kernel_is_bit_exact(
        data in proptest::collection::vec(-10.0f64..10.0, 27)
    ) {
        let gd = GridDims::new(1, 3, 3, 3);
        let kd = KernelDims { c_out: 1, c_in: 1, kx: 3, ky: 3, kz: 3 };
        let mut kernel = Value::zeros(kd.dims());
        kernel.data_mut()[kd.at(0, 0, 1, 1, 1)] = 1.0;
        let mut t = tape();
        let x = t.leaf(Value::new(gd.dims(), data.clone()).unwrap(), false).unwrap();
        let w = t.leaf(kernel, false).unwrap();
        let b = t.leaf(Value::zeros(vec![1]), false).unwrap();
        let y = t.conv3d(x, w, b, [1, 1, 1], Padding::Same).unwrap();
        prop_assert_eq!(t.value(y).data(), data.as_slice());
    }

    #[test]
    fn resize_maps_constant_fields_to_constant_fields(c in -5.0f64..5.0) {
        let gd = GridDims::new(2, 4, 2, 2);
        let mut t = tape();
        let x = t.leaf(Value::full(gd.dims(), c), false).unwrap();
        for factors in [
            [ResizeFactor::Double; 3],
            [ResizeFactor::Half; 3],
            [ResizeFactor::Double, ResizeFactor::Same, ResizeFactor::Half],
        ] {
            let y = t.resize_trilinear(x, factors).unwrap();
            for &v in t.value(y).data() {
                prop_assert!((v - c).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv3d_scalar_kernel_scales_every_voxel() {
    let gd = GridDims::new(1, 2, 2, 2);
    let kd = KernelDims { c_out: 1, c_in: 1, kx: 1, ky: 1, kz: 1 };
    let mut t = tape();
    let data = vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0, 7.0, -8.0];
    let x = t.leaf(Value::new(gd.dims(), data.clone()).unwrap(), false).unwrap();
    let w = t.leaf(Value::new(kd.dims(), vec![2.5]).unwrap(), false).unwrap();
    let b = t.leaf(Value::zeros(vec![1]), false).unwrap();
    let y = t.conv3d(x, w, b, [1, 1, 1], Padding::Same).unwrap();
    let got = t.value(y).data();
    for (o, i) in got.iter().zip(&data) {
        assert_eq!(*o, i * 2.5);
    }
}

#[test]
fn conv3d_interior_voxel_equals_hand_summed_dot_product() {
    let gd = GridDims::new(1, 4, 4, 4);
    let kd = KernelDims { c_out: 1, c_in: 1, kx: 3, ky: 3, kz: 3 };
    // Deterministic pseudo-random fill, reproducible by the hand oracle.
    let vol: Vec<f64> = (0..64).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
    let ker: Vec<f64> = (0..27).map(|i| ((i * 13 + 5) % 7) as f64 - 3.0).collect();
    let mut t = tape();
    let x = t.leaf(Value::new(gd.dims(), vol.clone()).unwrap(), false).unwrap();
    let w = t.leaf(Value::new(kd.dims(), ker.clone()).unwrap(), false).unwrap();
    let b = t.leaf(Value::new(vec![1], vec![0.25]).unwrap(), false).unwrap();
    let y = t.conv3d(x, w, b, [1, 1, 1], Padding::Same).unwrap();

    // Interior voxel (2,1,2): sum over the 27 taps, written out directly.
    let (cx, cy, cz) = (2usize, 1usize, 2usize);
    let mut expect = 0.25;
    for dz in 0..3usize {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let v = vol[gd.at(0, cx + dx - 1, cy + dy - 1, cz + dz - 1)];
                let k = ker[kd.at(0, 0, dx, dy, dz)];
                expect += v * k;
            }
        }
    }
    let got = t.value(y).data()[gd.at(0, cx, cy, cz)];
    assert!((got - expect).abs() < 1e-12, "got {got}, want {expect}");
}

#[test]
fn grid_sample_linear_ramp_shifts_exactly() {
    // v(x)=x, displacement (+0.5, 0, 0): trilinear is exact on linear
    // fields, so interior output is x + 0.5 and the far face clamps.
    let gd = GridDims::new(1, 4, 2, 2);
    let mut vol = Value::zeros(gd.dims());
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..4 {
                vol.data_mut()[gd.at(0, x, y, z)] = x as f64;
            }
        }
    }
    let dd = GridDims::new(3, 4, 2, 2);
    let mut disp = Value::zeros(dd.dims());
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..4 {
                disp.data_mut()[dd.at(0, x, y, z)] = 0.5;
            }
        }
    }
    let mut t = tape();
    let v = t.leaf(vol, false).unwrap();
    let d = t.leaf(disp, false).unwrap();
    let out = t.grid_sample(v, d).unwrap();
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..3 {
                let got = t.value(out).data()[gd.at(0, x, y, z)];
                assert!((got - (x as f64 + 0.5)).abs() < 1e-12);
            }
            // x=3 samples position 3.5, clamped to the border value 3.
            assert_eq!(t.value(out).data()[gd.at(0, 3, y, z)], 3.0);
        }
    }
}

#[test]
fn resize_half_of_unit_cube_averages_to_one() {
    let gd = GridDims::new(1, 2, 2, 2);
    let mut t = tape();
    let x = t.leaf(Value::full(gd.dims(), 1.0), false).unwrap();
    let y = t.resize_trilinear(x, [ResizeFactor::Half; 3]).unwrap();
    assert_eq!(t.dims(y), &[1, 1, 1, 1]);
    assert!((t.value(y).data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn resize_double_of_ramp_matches_per_sample_oracle() {
    // 1-D ramp along x at doubled resolution: output o reads source
    // coordinate (o + 0.5)/2 - 0.5, clamped, then interpolates linearly.
    let gd = GridDims::new(1, 4, 1, 1);
    let ramp = vec![0.0, 1.0, 2.0, 3.0];
    let mut t = tape();
    let x = t.leaf(Value::new(gd.dims(), ramp.clone()).unwrap(), false).unwrap();
    let y = t
        .resize_trilinear(x, [ResizeFactor::Double, ResizeFactor::Same, ResizeFactor::Same])
        .unwrap();
    let got = t.value(y).data();
    assert_eq!(got.len(), 8);
    for (o, &g) in got.iter().enumerate() {
        let src = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
        let i0 = src.floor();
        let frac = src - i0;
        let i0 = i0 as usize;
        let i1 = (i0 + 1).min(3);
        let expect = ramp[i0] * (1.0 - frac) + ramp[i1] * frac;
        assert!((g - expect).abs() < 1e-12, "sample {o}: got {g}, want {expect}");
    }
    // Spelled out, that convention gives these eight values.
    let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
    for (g, e) in got.iter().zip(expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn resize_half_rejects_odd_extents() {
    let gd = GridDims::new(1, 3, 2, 2);
    let mut t = tape();
    let x = t.leaf(Value::zeros(gd.dims()), false).unwrap();
    assert!(matches!(
        t.resize_trilinear(x, [ResizeFactor::Half; 3]),
        Err(coreg::Error::Shape(_))
    ));
}

#[test]
fn backward_examples_from_first_principles() {
    // loss = sum(x^2) at [1,2] -> grad [2,4]; untouched leaf keeps zeros.
    let mut t = tape();
    let x = t
        .leaf(Value::new(vec![2], vec![1.0, 2.0]).unwrap(), true)
        .unwrap();
    let p = t
        .leaf(Value::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap(), true)
        .unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    assert_eq!(t.grad(p).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn padding_same_requires_odd_kernels() {
    let gd = GridDims::new(1, 4, 4, 4);
    let kd = KernelDims { c_out: 1, c_in: 1, kx: 2, ky: 2, kz: 2 };
    let mut t = tape();
    let x = t.leaf(Value::zeros(gd.dims()), false).unwrap();
    let w = t.leaf(Value::zeros(kd.dims()), false).unwrap();
    let b = t.leaf(Value::zeros(vec![1]), false).unwrap();
    assert!(t.conv3d(x, w, b, [1, 1, 1], Padding::Same).is_err());
    assert!(t.conv3d(x, w, b, [2, 2, 2], Padding::Valid).is_ok());
}

#[test]
fn conv3d_rejects_channel_mismatch() {
    let gd = GridDims::new(2, 4, 4, 4);
    let kd = KernelDims { c_out: 1, c_in: 3, kx: 3, ky: 3, kz: 3 };
    let mut t = tape();
    let x = t.leaf(Value::zeros(gd.dims()), false).unwrap();
    let w = t.leaf(Value::zeros(kd.dims()), false).unwrap();
    let b = t.leaf(Value::zeros(vec![1]), false).unwrap();
    assert!(matches!(
        t.conv3d(x, w, b, [1, 1, 1], Padding::Same),
        Err(coreg::Error::Shape(_))
    ));
}

#[test]
fn grid_sample_rejects_mismatched_fields() {
    let mut t = tape();
    let vol = t.leaf(Value::zeros(GridDims::new(1, 4, 4, 4).dims()), false).unwrap();
    let wrong_channels = t
        .leaf(Value::zeros(GridDims::new(2, 4, 4, 4).dims()), false)
        .unwrap();
    assert!(t.grid_sample(vol, wrong_channels).is_err());
    let wrong_extent = t
        .leaf(Value::zeros(GridDims::new(3, 4, 4, 2).dims()), false)
        .unwrap();
    assert!(t.grid_sample(vol, wrong_extent).is_err());
}
