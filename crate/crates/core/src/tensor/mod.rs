//! Dense tensor values and the reverse-mode tape.
//!
//! Layout convention, fixed once for the whole crate: a feature grid with
//! `C` channels over a `W x H x D` voxel lattice stores element `(c,x,y,z)`
//! at flat offset `c + C*(x + W*(y + H*z))` — channels innermost, then x,
//! then y, then z. Equivalently the buffer is row-major `[D][H][W][C]`.
//! Flattening such a grid to an `N x C` matrix (`N = W*H*D`, voxel `n = x +
//! W*(y + H*z)`) is therefore a pure reinterpretation of the same bytes.
//!
//! Matrices are row-major `[rows][cols]`. Convolution kernels are row-major
//! `[C_out][kz][ky][kx][C_in]` so the innermost reduction over input
//! channels runs over contiguous memory.

mod conv;
mod sample;
mod tape;

pub(crate) use conv::{conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward};
pub(crate) use sample::{grid_sample_backward, grid_sample_forward, resize_backward, resize_forward};
pub use tape::{Op, OpKind, Tape, TensorId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar precision for tensor math. Training and inference run in `f32`;
/// `f64` exists so finite-difference gradient checks have meaningful
/// tolerances.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Extents of a channel-innermost feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub c: usize,
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl GridDims {
    pub fn new(c: usize, w: usize, h: usize, d: usize) -> Self {
        GridDims { c, w, h, d }
    }

    pub fn voxels(&self) -> usize {
        self.w * self.h * self.d
    }

    pub fn numel(&self) -> usize {
        self.c * self.voxels()
    }

    /// Flat offset of `(c,x,y,z)`.
    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        c + self.c * (x + self.w * (y + self.h * z))
    }

    /// Row-major dims vector (`[D,H,W,C]`) used by the tape.
    pub fn dims(&self) -> Vec<usize> {
        vec![self.d, self.h, self.w, self.c]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() != 4 {
            return Err(Error::shape(format!(
                "expected a 4-d feature grid, got dims {dims:?}"
            )));
        }
        Ok(GridDims {
            d: dims[0],
            h: dims[1],
            w: dims[2],
            c: dims[3],
        })
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }
}

/// Extents of a 3-d convolution kernel, stored `[C_out][kz][ky][kx][C_in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelDims {
    pub c_out: usize,
    pub c_in: usize,
    pub kx: usize,
    pub ky: usize,
    pub kz: usize,
}

impl KernelDims {
    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.kx * self.ky * self.kz
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, x: usize, y: usize, z: usize) -> usize {
        (((co * self.kz + z) * self.ky + y) * self.kx + x) * self.c_in + ci
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.c_out, self.kz, self.ky, self.kx, self.c_in]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() != 5 {
            return Err(Error::shape(format!(
                "expected a 5-d convolution kernel, got dims {dims:?}"
            )));
        }
        Ok(KernelDims {
            c_out: dims[0],
            kz: dims[1],
            ky: dims[2],
            kx: dims[3],
            c_in: dims[4],
        })
    }
}

/// Spatial axes of a feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

/// Padding mode for convolutions. `Same` requires odd kernel extents and
/// pads symmetrically by `(k-1)/2`; `Valid` applies no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Per-axis resampling factor for trilinear resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeFactor {
    Half,
    Same,
    Double,
}

/// A plain dense tensor value with no gradient participation. Parameters,
/// volumes entering the network, and anything crossing a tape boundary
/// live as `Value`s.
#[derive(Debug, Clone, PartialEq)]
pub struct Value<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Value<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() || dims.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Value { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Value {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, fill: T) -> Self {
        let n: usize = dims.iter().product();
        Value {
            dims,
            data: vec![fill; n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Value {
            dims: vec![1],
            data: vec![x],
        }
    }

    pub fn grid(dims: GridDims) -> Self {
        Value::zeros(dims.dims())
    }

    pub fn kernel(kd: KernelDims) -> Self {
        Value::zeros(kd.dims())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn grid_dims(&self) -> Result<GridDims> {
        GridDims::from_dims(&self.dims)
    }

    pub fn fill_std_normal<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: T) {
        for v in &mut self.data {
            *v = T::std_normal(rng) * scale;
        }
    }

    pub fn map_precision<U: Real>(&self) -> Value<U> {
        Value {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }
}

/// Dot product with four independent accumulator chains. The fixed
/// summation order keeps results deterministic within a build.
#[inline]
pub(crate) fn dot4<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = T::zero();
    for (&xa, &xb) in a
        .chunks_exact(4)
        .remainder()
        .iter()
        .zip(b.chunks_exact(4).remainder())
    {
        tail += xa * xb;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`, elementwise.
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_offset_matches_file_layout() {
        let g = GridDims::new(3, 4, 5, 2);
        // offset(c,x,y,z) = c + C*(x + W*(y + H*z))
        assert_eq!(g.at(2, 1, 3, 1), 2 + 3 * (1 + 4 * (3 + 5 * 1)));
        assert_eq!(g.numel(), 3 * 4 * 5 * 2);
    }

    #[test]
    fn value_rejects_mismatched_dims() {
        assert!(Value::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Value::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn dot4_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot4(&a, &b) - naive).abs() < 1e-12);
    }
}
