//! Trilinear warping and resampling.
//!
//! `grid_sample` is the spatial-transform block: a pull-based warp that
//! reads the source volume at `voxel + displacement`. Out-of-bounds sample
//! positions clamp to the border value so warps near edges do not fabricate
//! dark rims. `resize` follows the align-corners-false convention: output
//! sample `o` reads source coordinate `(o + 0.5) * in/out - 0.5`.

use super::{GridDims, Real, ResizeFactor};
use crate::error::{Error, Result};

/// One interpolation axis: lower corner, upper corner, fractional weight,
/// and whether the raw coordinate was clamped (derivative gate).
#[derive(Clone, Copy)]
struct AxisSample<T> {
    i0: usize,
    i1: usize,
    t: T,
    interior: bool,
}

#[inline]
fn axis_sample<T: Real>(pos: T, extent: usize) -> AxisSample<T> {
    let max = T::of((extent - 1) as f64);
    let interior = pos > T::zero() && pos < max;
    let p = pos.max(T::zero()).min(max);
    let i0f = p.floor();
    let i0 = i0f.to_f64() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    AxisSample {
        i0,
        i1,
        t: p - i0f,
        interior,
    }
}

pub(crate) fn grid_sample_check(vol: GridDims, disp: GridDims) -> Result<()> {
    if disp.c != 3 {
        return Err(Error::shape(format!(
            "displacement field needs 3 channels (dx,dy,dz), got {}",
            disp.c
        )));
    }
    if vol.spatial() != disp.spatial() {
        return Err(Error::shape(format!(
            "grid_sample spatial mismatch: volume {:?} vs displacement {:?}",
            vol.spatial(),
            disp.spatial()
        )));
    }
    Ok(())
}

pub(crate) fn grid_sample_forward<T: Real>(
    vol: &[T],
    vd: GridDims,
    disp: &[T],
    dd: GridDims,
) -> Result<Vec<T>> {
    grid_sample_check(vd, dd)?;
    let mut out = vec![T::zero(); vd.numel()];
    for z in 0..vd.d {
        for y in 0..vd.h {
            for x in 0..vd.w {
                let d_off = dd.at(0, x, y, z);
                let px = T::of(x as f64) + disp[d_off];
                let py = T::of(y as f64) + disp[d_off + 1];
                let pz = T::of(z as f64) + disp[d_off + 2];
                let sx = axis_sample(px, vd.w);
                let sy = axis_sample(py, vd.h);
                let sz = axis_sample(pz, vd.d);
                let o_off = vd.at(0, x, y, z);
                if sx.t == T::zero() && sy.t == T::zero() && sz.t == T::zero() {
                    // On-lattice sample: copy bit-exactly.
                    let i_off = vd.at(0, sx.i0, sy.i0, sz.i0);
                    out[o_off..o_off + vd.c].copy_from_slice(&vol[i_off..i_off + vd.c]);
                    continue;
                }
                let one = T::one();
                for c in 0..vd.c {
                    let v = |xi: usize, yi: usize, zi: usize| vol[vd.at(c, xi, yi, zi)];
                    let c00 = v(sx.i0, sy.i0, sz.i0) * (one - sx.t) + v(sx.i1, sy.i0, sz.i0) * sx.t;
                    let c10 = v(sx.i0, sy.i1, sz.i0) * (one - sx.t) + v(sx.i1, sy.i1, sz.i0) * sx.t;
                    let c01 = v(sx.i0, sy.i0, sz.i1) * (one - sx.t) + v(sx.i1, sy.i0, sz.i1) * sx.t;
                    let c11 = v(sx.i0, sy.i1, sz.i1) * (one - sx.t) + v(sx.i1, sy.i1, sz.i1) * sx.t;
                    let c0 = c00 * (one - sy.t) + c10 * sy.t;
                    let c1 = c01 * (one - sy.t) + c11 * sy.t;
                    out[o_off + c] = c0 * (one - sz.t) + c1 * sz.t;
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward<T: Real>(
    grad_out: &[T],
    vol: &[T],
    vd: GridDims,
    disp: &[T],
    dd: GridDims,
    grad_vol: Option<&mut [T]>,
    grad_disp: Option<&mut [T]>,
) {
    let one = T::one();
    let mut grad_vol = grad_vol;
    let mut grad_disp = grad_disp;
    for z in 0..vd.d {
        for y in 0..vd.h {
            for x in 0..vd.w {
                let d_off = dd.at(0, x, y, z);
                let px = T::of(x as f64) + disp[d_off];
                let py = T::of(y as f64) + disp[d_off + 1];
                let pz = T::of(z as f64) + disp[d_off + 2];
                let sx = axis_sample(px, vd.w);
                let sy = axis_sample(py, vd.h);
                let sz = axis_sample(pz, vd.d);
                let o_off = vd.at(0, x, y, z);
                let wx = [one - sx.t, sx.t];
                let wy = [one - sy.t, sy.t];
                let wz = [one - sz.t, sz.t];
                let xs = [sx.i0, sx.i1];
                let ys = [sy.i0, sy.i1];
                let zs = [sz.i0, sz.i1];
                let mut gpx = T::zero();
                let mut gpy = T::zero();
                let mut gpz = T::zero();
                for c in 0..vd.c {
                    let g = grad_out[o_off + c];
                    if g == T::zero() {
                        continue;
                    }
                    for (kz, &zi) in zs.iter().enumerate() {
                        for (ky, &yi) in ys.iter().enumerate() {
                            for (kx, &xi) in xs.iter().enumerate() {
                                let v = vol[vd.at(c, xi, yi, zi)];
                                let sgn = |k: usize| if k == 0 { -one } else { one };
                                if let Some(gv) = grad_vol.as_deref_mut() {
                                    gv[vd.at(c, xi, yi, zi)] += g * wx[kx] * wy[ky] * wz[kz];
                                }
                                gpx += g * v * sgn(kx) * wy[ky] * wz[kz];
                                gpy += g * v * wx[kx] * sgn(ky) * wz[kz];
                                gpz += g * v * wx[kx] * wy[ky] * sgn(kz);
                            }
                        }
                    }
                }
                if let Some(gd) = grad_disp.as_deref_mut() {
                    if sx.interior {
                        gd[d_off] += gpx;
                    }
                    if sy.interior {
                        gd[d_off + 1] += gpy;
                    }
                    if sz.interior {
                        gd[d_off + 2] += gpz;
                    }
                }
            }
        }
    }
}

pub(crate) fn resize_out_extent(n: usize, factor: ResizeFactor) -> Result<usize> {
    match factor {
        ResizeFactor::Same => Ok(n),
        ResizeFactor::Double => Ok(n * 2),
        ResizeFactor::Half => {
            if n % 2 != 0 {
                return Err(Error::shape(format!(
                    "cannot halve odd extent {n} with trilinear resize"
                )));
            }
            Ok(n / 2)
        }
    }
}

/// Per-output-sample interpolation table along one axis.
fn axis_table<T: Real>(n_in: usize, n_out: usize) -> Vec<AxisSample<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| axis_sample(T::of((o as f64 + 0.5) * scale - 0.5), n_in))
        .collect()
}

pub(crate) fn resize_forward<T: Real>(
    input: &[T],
    id: GridDims,
    factors: [ResizeFactor; 3],
) -> Result<(Vec<T>, GridDims)> {
    let od = GridDims {
        c: id.c,
        w: resize_out_extent(id.w, factors[0])?,
        h: resize_out_extent(id.h, factors[1])?,
        d: resize_out_extent(id.d, factors[2])?,
    };
    let tx = axis_table::<T>(id.w, od.w);
    let ty = axis_table::<T>(id.h, od.h);
    let tz = axis_table::<T>(id.d, od.d);
    let one = T::one();
    let mut out = vec![T::zero(); od.numel()];
    for (z, sz) in tz.iter().enumerate() {
        for (y, sy) in ty.iter().enumerate() {
            for (x, sx) in tx.iter().enumerate() {
                let o_off = od.at(0, x, y, z);
                for c in 0..id.c {
                    let v = |xi: usize, yi: usize, zi: usize| input[id.at(c, xi, yi, zi)];
                    let c00 = v(sx.i0, sy.i0, sz.i0) * (one - sx.t) + v(sx.i1, sy.i0, sz.i0) * sx.t;
                    let c10 = v(sx.i0, sy.i1, sz.i0) * (one - sx.t) + v(sx.i1, sy.i1, sz.i0) * sx.t;
                    let c01 = v(sx.i0, sy.i0, sz.i1) * (one - sx.t) + v(sx.i1, sy.i0, sz.i1) * sx.t;
                    let c11 = v(sx.i0, sy.i1, sz.i1) * (one - sx.t) + v(sx.i1, sy.i1, sz.i1) * sx.t;
                    let c0 = c00 * (one - sy.t) + c10 * sy.t;
                    let c1 = c01 * (one - sy.t) + c11 * sy.t;
                    out[o_off + c] = c0 * (one - sz.t) + c1 * sz.t;
                }
            }
        }
    }
    Ok((out, od))
}

pub(crate) fn resize_backward<T: Real>(
    grad_out: &[T],
    out_dims: GridDims,
    in_dims: GridDims,
    grad_in: &mut [T],
) {
    let tx = axis_table::<T>(in_dims.w, out_dims.w);
    let ty = axis_table::<T>(in_dims.h, out_dims.h);
    let tz = axis_table::<T>(in_dims.d, out_dims.d);
    let one = T::one();
    for (z, sz) in tz.iter().enumerate() {
        for (y, sy) in ty.iter().enumerate() {
            for (x, sx) in tx.iter().enumerate() {
                let o_off = out_dims.at(0, x, y, z);
                let wz = [one - sz.t, sz.t];
                let wy = [one - sy.t, sy.t];
                let wx = [one - sx.t, sx.t];
                for c in 0..in_dims.c {
                    let g = grad_out[o_off + c];
                    if g == T::zero() {
                        continue;
                    }
                    for (kz, &zi) in [sz.i0, sz.i1].iter().enumerate() {
                        for (ky, &yi) in [sy.i0, sy.i1].iter().enumerate() {
                            for (kx, &xi) in [sx.i0, sx.i1].iter().enumerate() {
                                grad_in[in_dims.at(c, xi, yi, zi)] += g * wx[kx] * wy[ky] * wz[kz];
                            }
                        }
                    }
                }
            }
        }
    }
}
