//! Direct 3-d convolution and transposed convolution, forward and backward.
//!
//! All loops keep the input-channel reduction innermost where both the
//! input grid and the kernel are contiguous.

use super::{axpy, dot4, GridDims, KernelDims, Padding, Real};
use crate::error::{Error, Result};

fn out_extent(n: usize, k: usize, s: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < k {
        return Err(Error::shape(format!(
            "convolution input extent {n} (pad {pad}) smaller than kernel {k}"
        )));
    }
    Ok((n + 2 * pad - k) / s + 1)
}

fn paddings(kd: &KernelDims, padding: Padding) -> Result<[usize; 3]> {
    match padding {
        Padding::Valid => Ok([0, 0, 0]),
        Padding::Same => {
            if kd.kx % 2 == 0 || kd.ky % 2 == 0 || kd.kz % 2 == 0 {
                return Err(Error::shape(format!(
                    "same-padding requires odd kernel extents, got {}x{}x{}",
                    kd.kx, kd.ky, kd.kz
                )));
            }
            Ok([(kd.kx - 1) / 2, (kd.ky - 1) / 2, (kd.kz - 1) / 2])
        }
    }
}

pub(crate) fn conv3d_out_dims(
    in_dims: GridDims,
    kd: KernelDims,
    stride: [usize; 3],
    padding: Padding,
) -> Result<GridDims> {
    if kd.c_in != in_dims.c {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input has {}, kernel expects {}",
            in_dims.c, kd.c_in
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::usage("conv3d stride must be positive"));
    }
    let pad = paddings(&kd, padding)?;
    Ok(GridDims {
        c: kd.c_out,
        w: out_extent(in_dims.w, kd.kx, stride[0], pad[0])?,
        h: out_extent(in_dims.h, kd.ky, stride[1], pad[1])?,
        d: out_extent(in_dims.d, kd.kz, stride[2], pad[2])?,
    })
}

pub(crate) fn conv3d_forward<T: Real>(
    input: &[T],
    in_dims: GridDims,
    weight: &[T],
    kd: KernelDims,
    bias: &[T],
    stride: [usize; 3],
    padding: Padding,
) -> Result<(Vec<T>, GridDims)> {
    let od = conv3d_out_dims(in_dims, kd, stride, padding)?;
    let pad = paddings(&kd, padding)?;
    let c_in = in_dims.c;
    let mut out = vec![T::zero(); od.numel()];
    for zo in 0..od.d {
        let z_base = (zo * stride[2]) as isize - pad[2] as isize;
        for yo in 0..od.h {
            let y_base = (yo * stride[1]) as isize - pad[1] as isize;
            for xo in 0..od.w {
                let x_base = (xo * stride[0]) as isize - pad[0] as isize;
                let o_off = od.at(0, xo, yo, zo);
                for co in 0..kd.c_out {
                    let mut acc = bias[co];
                    for kz in 0..kd.kz {
                        let z = z_base + kz as isize;
                        if z < 0 || z >= in_dims.d as isize {
                            continue;
                        }
                        for ky in 0..kd.ky {
                            let y = y_base + ky as isize;
                            if y < 0 || y >= in_dims.h as isize {
                                continue;
                            }
                            for kx in 0..kd.kx {
                                let x = x_base + kx as isize;
                                if x < 0 || x >= in_dims.w as isize {
                                    continue;
                                }
                                let i_off = in_dims.at(0, x as usize, y as usize, z as usize);
                                let w_off = kd.at(co, 0, kx, ky, kz);
                                acc += dot4(
                                    &input[i_off..i_off + c_in],
                                    &weight[w_off..w_off + c_in],
                                );
                            }
                        }
                    }
                    out[o_off + co] = acc;
                }
            }
        }
    }
    Ok((out, od))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Real>(
    grad_out: &[T],
    out_dims: GridDims,
    input: &[T],
    in_dims: GridDims,
    weight: &[T],
    kd: KernelDims,
    stride: [usize; 3],
    padding: Padding,
    grad_in: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let pad = paddings(&kd, padding).expect("validated in forward");
    let c_in = in_dims.c;
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    let mut grad_b = grad_b;
    for zo in 0..out_dims.d {
        let z_base = (zo * stride[2]) as isize - pad[2] as isize;
        for yo in 0..out_dims.h {
            let y_base = (yo * stride[1]) as isize - pad[1] as isize;
            for xo in 0..out_dims.w {
                let x_base = (xo * stride[0]) as isize - pad[0] as isize;
                let o_off = out_dims.at(0, xo, yo, zo);
                for co in 0..kd.c_out {
                    let g = grad_out[o_off + co];
                    if let Some(gb) = grad_b.as_deref_mut() {
                        gb[co] += g;
                    }
                    for kz in 0..kd.kz {
                        let z = z_base + kz as isize;
                        if z < 0 || z >= in_dims.d as isize {
                            continue;
                        }
                        for ky in 0..kd.ky {
                            let y = y_base + ky as isize;
                            if y < 0 || y >= in_dims.h as isize {
                                continue;
                            }
                            for kx in 0..kd.kx {
                                let x = x_base + kx as isize;
                                if x < 0 || x >= in_dims.w as isize {
                                    continue;
                                }
                                let i_off = in_dims.at(0, x as usize, y as usize, z as usize);
                                let w_off = kd.at(co, 0, kx, ky, kz);
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    axpy(g, &weight[w_off..w_off + c_in], &mut gi[i_off..i_off + c_in]);
                                }
                                if let Some(gw) = grad_w.as_deref_mut() {
                                    axpy(g, &input[i_off..i_off + c_in], &mut gw[w_off..w_off + c_in]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn transpose_checks(in_dims: GridDims, kd: KernelDims, stride: [usize; 3]) -> Result<GridDims> {
    if kd.c_in != in_dims.c {
        return Err(Error::shape(format!(
            "conv_transpose3d channel mismatch: input has {}, kernel expects {}",
            in_dims.c, kd.c_in
        )));
    }
    if [kd.kx, kd.ky, kd.kz] != stride {
        return Err(Error::shape(format!(
            "conv_transpose3d kernel extents {}x{}x{} must equal the stride {:?}",
            kd.kx, kd.ky, kd.kz, stride
        )));
    }
    Ok(GridDims {
        c: kd.c_out,
        w: in_dims.w * stride[0],
        h: in_dims.h * stride[1],
        d: in_dims.d * stride[2],
    })
}

/// Transposed convolution with kernel extents equal to the stride, so every
/// output voxel receives exactly one kernel tap. Used as the learnable x2
/// upsampling block.
pub(crate) fn conv_transpose3d_forward<T: Real>(
    input: &[T],
    in_dims: GridDims,
    weight: &[T],
    kd: KernelDims,
    bias: &[T],
    stride: [usize; 3],
) -> Result<(Vec<T>, GridDims)> {
    let od = transpose_checks(in_dims, kd, stride)?;
    let c_in = in_dims.c;
    let mut out = vec![T::zero(); od.numel()];
    for zo in 0..od.d {
        let (zi, kz) = (zo / stride[2], zo % stride[2]);
        for yo in 0..od.h {
            let (yi, ky) = (yo / stride[1], yo % stride[1]);
            for xo in 0..od.w {
                let (xi, kx) = (xo / stride[0], xo % stride[0]);
                let i_off = in_dims.at(0, xi, yi, zi);
                let o_off = od.at(0, xo, yo, zo);
                for co in 0..kd.c_out {
                    let w_off = kd.at(co, 0, kx, ky, kz);
                    out[o_off + co] = bias[co]
                        + dot4(&input[i_off..i_off + c_in], &weight[w_off..w_off + c_in]);
                }
            }
        }
    }
    Ok((out, od))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose3d_backward<T: Real>(
    grad_out: &[T],
    out_dims: GridDims,
    input: &[T],
    in_dims: GridDims,
    weight: &[T],
    kd: KernelDims,
    stride: [usize; 3],
    grad_in: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let c_in = in_dims.c;
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    let mut grad_b = grad_b;
    for zo in 0..out_dims.d {
        let (zi, kz) = (zo / stride[2], zo % stride[2]);
        for yo in 0..out_dims.h {
            let (yi, ky) = (yo / stride[1], yo % stride[1]);
            for xo in 0..out_dims.w {
                let (xi, kx) = (xo / stride[0], xo % stride[0]);
                let i_off = in_dims.at(0, xi, yi, zi);
                let o_off = out_dims.at(0, xo, yo, zo);
                for co in 0..kd.c_out {
                    let g = grad_out[o_off + co];
                    let w_off = kd.at(co, 0, kx, ky, kz);
                    if let Some(gb) = grad_b.as_deref_mut() {
                        gb[co] += g;
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        axpy(g, &weight[w_off..w_off + c_in], &mut gi[i_off..i_off + c_in]);
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        axpy(g, &input[i_off..i_off + c_in], &mut gw[w_off..w_off + c_in]);
                    }
                }
            }
        }
    }
}
