//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A `Tape` is built afresh for every forward pass: leaves go in first,
//! each op records its parents by `TensorId`, and a single `backward` call
//! from a scalar root accumulates gradients for every node that needs
//! them. Parents always precede children on the tape, so the reverse scan
//! is already a valid topological order. After `backward` the tape is
//! consumed: further pushes are usage errors until `reset`.
//!
//! Every push scans the fresh values for NaN/Inf and fails with a numeric
//! error, so divergence surfaces at the op that produced it.

use super::{
    axpy, conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward,
    dot4, grid_sample_backward, grid_sample_forward, resize_backward, resize_forward, Axis,
    GridDims, KernelDims, Padding, Real, ResizeFactor, Value,
};
use crate::error::{Error, Result};

/// Handle to a node on a specific tape. Ids are only meaningful for the
/// tape that produced them and are invalidated by `reset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Affine {
        a: TensorId,
        scale: f64,
        shift: f64,
    },
    Sqrt(TensorId),
    Exp(TensorId),
    Clamp {
        a: TensorId,
        lo: f64,
        hi: f64,
    },
    Sigmoid(TensorId),
    LeakyRelu {
        a: TensorId,
        slope: f64,
    },
    MatMul(TensorId, TensorId),
    Transpose2d(TensorId),
    Softmax(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Reshape(TensorId),
    ConcatChannels(Vec<TensorId>),
    ShiftDiff {
        a: TensorId,
        axis: Axis,
    },
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: Padding,
    },
    ConvTranspose3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
    },
    GridSample {
        vol: TensorId,
        disp: TensorId,
    },
    ResizeTrilinear {
        a: TensorId,
        factors: [ResizeFactor; 3],
    },
}

/// Op discriminant, used to name ops in diagnostics and to target the
/// gradient-perturbation hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Sqrt,
    Exp,
    Clamp,
    Sigmoid,
    LeakyRelu,
    MatMul,
    Transpose2d,
    Softmax,
    SumAll,
    MeanAll,
    Reshape,
    ConcatChannels,
    ShiftDiff,
    Conv3d,
    ConvTranspose3d,
    GridSample,
    ResizeTrilinear,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Affine,
        OpKind::Sqrt,
        OpKind::Exp,
        OpKind::Clamp,
        OpKind::Sigmoid,
        OpKind::LeakyRelu,
        OpKind::MatMul,
        OpKind::Transpose2d,
        OpKind::Softmax,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::Reshape,
        OpKind::ConcatChannels,
        OpKind::ShiftDiff,
        OpKind::Conv3d,
        OpKind::ConvTranspose3d,
        OpKind::GridSample,
        OpKind::ResizeTrilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Affine => "affine",
            OpKind::Sqrt => "sqrt",
            OpKind::Exp => "exp",
            OpKind::Clamp => "clamp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::MatMul => "matmul",
            OpKind::Transpose2d => "transpose2d",
            OpKind::Softmax => "softmax",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::Reshape => "reshape",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::ShiftDiff => "shift_diff",
            OpKind::Conv3d => "conv3d",
            OpKind::ConvTranspose3d => "conv_transpose3d",
            OpKind::GridSample => "grid_sample",
            OpKind::ResizeTrilinear => "resize_trilinear",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown op name {s:?}")))
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Exp(..) => OpKind::Exp,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose2d(..) => OpKind::Transpose2d,
            Op::Softmax(..) => OpKind::Softmax,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::ShiftDiff { .. } => OpKind::ShiftDiff,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::ConvTranspose3d { .. } => OpKind::ConvTranspose3d,
            Op::GridSample { .. } => OpKind::GridSample,
            Op::ResizeTrilinear { .. } => OpKind::ResizeTrilinear,
        }
    }
}

struct Node<T> {
    op: Op,
    value: Value<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
    done: bool,
    perturb: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
            perturb: None,
        }
    }

    /// Scales the backward contribution of every op of the given kind by a
    /// small factor. Exists so the finite-difference harness can prove it
    /// catches a wrong analytic gradient.
    pub fn set_backward_perturbation(&mut self, kind: Option<OpKind>) {
        self.perturb = kind;
    }

    /// Clears all nodes and gradients so the tape can host a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Value<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    /// Scalar convenience: the single element of a 1-element tensor.
    pub fn scalar(&self, id: TensorId) -> T {
        self.nodes[id.0].value.item()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn grad(&self, id: TensorId) -> Result<&[T]> {
        if !self.done {
            return Err(Error::usage("gradients are only available after backward"));
        }
        let g = &self.grads[id.0];
        if g.is_empty() {
            return Err(Error::usage(
                "tensor does not track gradients (no differentiable ancestor)",
            ));
        }
        Ok(g)
    }

    fn push(&mut self, op: Op, value: Value<T>, needs_grad: bool) -> Result<TensorId> {
        if self.done {
            return Err(Error::usage(
                "tape already consumed by backward; reset() before pushing more ops",
            ));
        }
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {bad} produced by op '{}'",
                op.kind().name()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Installs a tensor as a differentiable or plain leaf.
    pub fn leaf(&mut self, value: Value<T>, needs_grad: bool) -> Result<TensorId> {
        self.push(Op::Leaf, value, needs_grad)
    }

    /// Leaf with no gradient participation.
    pub fn constant(&mut self, value: Value<T>) -> Result<TensorId> {
        self.leaf(value, false)
    }

    fn binary_dims(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() == vb.dims() {
            Ok(va.dims().to_vec())
        } else if vb.numel() == 1 {
            Ok(va.dims().to_vec())
        } else if va.numel() == 1 {
            Ok(vb.dims().to_vec())
        } else {
            Err(Error::shape(format!(
                "{what}: incompatible dims {:?} vs {:?} (only scalar broadcast supported)",
                va.dims(),
                vb.dims()
            )))
        }
    }

    fn elementwise2(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<TensorId> {
        let dims = self.binary_dims(a, b, op.kind().name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = dims.iter().product();
        let data: Vec<T> = (0..n)
            .map(|i| {
                let xa = va.data()[if va.numel() == 1 { 0 } else { i }];
                let xb = vb.data()[if vb.numel() == 1 { 0 } else { i }];
                f(xa, xb)
            })
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(op, Value::new(dims, data)?, ng)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(T) -> T) -> Result<TensorId> {
        let va = self.value(a);
        let data: Vec<T> = va.data().iter().map(|&x| f(x)).collect();
        let dims = va.dims().to_vec();
        let ng = self.needs_grad(a);
        self.push(op, Value::new(dims, data)?, ng)
    }

    /// `a * scale + shift`, elementwise with compile-time constants.
    pub fn affine(&mut self, a: TensorId, scale: f64, shift: f64) -> Result<TensorId> {
        let (s, c) = (T::of(scale), T::of(shift));
        self.unary(a, Op::Affine { a, scale, shift }, |x| x * s + c)
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.max(l).min(h))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId> {
        let s = T::of(slope);
        self.unary(a, Op::LeakyRelu { a, slope }, |x| {
            if x >= T::zero() {
                x
            } else {
                x * s
            }
        })
    }

    /// Row-major matrix product `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims().len() != 2 || vb.dims().len() != 2 || va.dims()[1] != vb.dims()[0] {
            return Err(Error::shape(format!(
                "matmul needs [r,k] x [k,c], got {:?} x {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let (r, k, c) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let a_row = &va.data()[i * k..(i + 1) * k];
            let o_row = &mut out[i * c..(i + 1) * c];
            for (kk, &av) in a_row.iter().enumerate() {
                axpy(av, &vb.data()[kk * c..(kk + 1) * c], o_row);
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::MatMul(a, b), Value::new(vec![r, c], out)?, ng)
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.dims().len() != 2 {
            return Err(Error::shape(format!(
                "transpose2d needs a matrix, got {:?}",
                va.dims()
            )));
        }
        let (r, c) = (va.dims()[0], va.dims()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let ng = self.needs_grad(a);
        self.push(Op::Transpose2d(a), Value::new(vec![c, r], out)?, ng)
    }

    /// Softmax over the last (contiguous) axis, max-shifted for stability.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let lane = *va.dims().last().expect("values have at least one dim");
        let mut out = va.data().to_vec();
        for row in out.chunks_exact_mut(lane) {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let dims = va.dims().to_vec();
        let ng = self.needs_grad(a);
        self.push(Op::Softmax(a), Value::new(dims, out)?, ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s = {
            let data = self.value(a).data();
            let mut acc = T::zero();
            for chunk in data.chunks(4096) {
                acc += dot4_ones(chunk);
            }
            acc
        };
        let ng = self.needs_grad(a);
        self.push(Op::SumAll(a), Value::scalar(s), ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        let s = {
            let data = self.value(a).data();
            let mut acc = T::zero();
            for chunk in data.chunks(4096) {
                acc += dot4_ones(chunk);
            }
            acc
        };
        let ng = self.needs_grad(a);
        self.push(Op::MeanAll(a), Value::scalar(s / T::of(n as f64)), ng)
    }

    pub fn reshape(&mut self, a: TensorId, dims: Vec<usize>) -> Result<TensorId> {
        let va = self.value(a);
        let n: usize = dims.iter().product();
        if n != va.numel() || dims.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                va.dims(),
                dims
            )));
        }
        let data = va.data().to_vec();
        let ng = self.needs_grad(a);
        self.push(Op::Reshape(a), Value::new(dims, data)?, ng)
    }

    /// Concatenates feature grids along the channel axis.
    pub fn concat_channels(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::usage("concat_channels needs at least one input"));
        }
        let first = self.value(ids[0]).grid_dims()?;
        let mut c_total = 0;
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let gd = self.value(id).grid_dims()?;
            if gd.spatial() != first.spatial() {
                return Err(Error::shape(format!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    gd.spatial(),
                    first.spatial()
                )));
            }
            c_total += gd.c;
            parts.push(gd.c);
        }
        let od = GridDims::new(c_total, first.w, first.h, first.d);
        let mut out = vec![T::zero(); od.numel()];
        for n in 0..od.voxels() {
            let mut dst = n * c_total;
            for (slot, &id) in ids.iter().enumerate() {
                let ck = parts[slot];
                let src = n * ck;
                out[dst..dst + ck].copy_from_slice(&self.value(id).data()[src..src + ck]);
                dst += ck;
            }
        }
        let ng = ids.iter().any(|&id| self.needs_grad(id));
        self.push(
            Op::ConcatChannels(ids.to_vec()),
            Value::new(od.dims(), out)?,
            ng,
        )
    }

    /// Forward difference along one spatial axis: `out(p) = in(p) -
    /// in(p + e_axis)`, output one voxel shorter along that axis.
    pub fn shift_diff(&mut self, a: TensorId, axis: Axis) -> Result<TensorId> {
        let gd = self.value(a).grid_dims()?;
        let [w, h, d] = gd.spatial();
        let (ow, oh, od_) = match axis {
            Axis::X => (w - 1, h, d),
            Axis::Y => (w, h - 1, d),
            Axis::Z => (w, h, d - 1),
        };
        if ow == 0 || oh == 0 || od_ == 0 {
            return Err(Error::shape(format!(
                "shift_diff along {axis:?} needs extent >= 2, grid is {:?}",
                gd.spatial()
            )));
        }
        let od = GridDims::new(gd.c, ow, oh, od_);
        let (dx, dy, dz) = match axis {
            Axis::X => (1, 0, 0),
            Axis::Y => (0, 1, 0),
            Axis::Z => (0, 0, 1),
        };
        let mut out = vec![T::zero(); od.numel()];
        let data = self.value(a).data();
        for z in 0..od.d {
            for y in 0..od.h {
                for x in 0..od.w {
                    let o = od.at(0, x, y, z);
                    let i0 = gd.at(0, x, y, z);
                    let i1 = gd.at(0, x + dx, y + dy, z + dz);
                    for c in 0..gd.c {
                        out[o + c] = data[i0 + c] - data[i1 + c];
                    }
                }
            }
        }
        let ng = self.needs_grad(a);
        self.push(Op::ShiftDiff { a, axis }, Value::new(od.dims(), out)?, ng)
    }

    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<TensorId> {
        let id = self.value(input).grid_dims()?;
        let kd = KernelDims::from_dims(self.value(weight).dims())?;
        if self.value(bias).dims() != [kd.c_out] {
            return Err(Error::shape(format!(
                "conv3d bias dims {:?} do not match {} output channels",
                self.value(bias).dims(),
                kd.c_out
            )));
        }
        let (out, od) = conv3d_forward(
            self.value(input).data(),
            id,
            self.value(weight).data(),
            kd,
            self.value(bias).data(),
            stride,
            padding,
        )?;
        let ng =
            self.needs_grad(input) || self.needs_grad(weight) || self.needs_grad(bias);
        self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            Value::new(od.dims(), out)?,
            ng,
        )
    }

    pub fn conv_transpose3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
    ) -> Result<TensorId> {
        let id = self.value(input).grid_dims()?;
        let kd = KernelDims::from_dims(self.value(weight).dims())?;
        if self.value(bias).dims() != [kd.c_out] {
            return Err(Error::shape(format!(
                "conv_transpose3d bias dims {:?} do not match {} output channels",
                self.value(bias).dims(),
                kd.c_out
            )));
        }
        let (out, od) = conv_transpose3d_forward(
            self.value(input).data(),
            id,
            self.value(weight).data(),
            kd,
            self.value(bias).data(),
            stride,
        )?;
        let ng =
            self.needs_grad(input) || self.needs_grad(weight) || self.needs_grad(bias);
        self.push(
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                stride,
            },
            Value::new(od.dims(), out)?,
            ng,
        )
    }

    /// Pull-based trilinear warp: reads `vol` at `voxel + disp` (voxel
    /// units, border clamped). `disp` carries channels (dx,dy,dz).
    pub fn grid_sample(&mut self, vol: TensorId, disp: TensorId) -> Result<TensorId> {
        let vd = self.value(vol).grid_dims()?;
        let dd = self.value(disp).grid_dims()?;
        let out = grid_sample_forward(self.value(vol).data(), vd, self.value(disp).data(), dd)?;
        let ng = self.needs_grad(vol) || self.needs_grad(disp);
        self.push(Op::GridSample { vol, disp }, Value::new(vd.dims(), out)?, ng)
    }

    pub fn resize_trilinear(
        &mut self,
        a: TensorId,
        factors: [ResizeFactor; 3],
    ) -> Result<TensorId> {
        let gd = self.value(a).grid_dims()?;
        let (out, od) = resize_forward(self.value(a).data(), gd, factors)?;
        let ng = self.needs_grad(a);
        self.push(
            Op::ResizeTrilinear { a, factors },
            Value::new(od.dims(), out)?,
            ng,
        )
    }

    /// Accumulates d(root)/d(node) into every gradient-tracking node.
    /// `root` must be a scalar. Consumes the tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.done {
            return Err(Error::usage(
                "backward already ran on this tape; reset() before running again",
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::usage(format!(
                "backward root must be scalar, got dims {:?}",
                self.dims(root)
            )));
        }
        if !self.needs_grad(root) {
            return Err(Error::usage(
                "backward root does not depend on any gradient-tracking leaf",
            ));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![T::zero(); n.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        self.grads[root.0][0] = T::one();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let mut g = std::mem::take(&mut self.grads[i]);
            let restore = g.clone();
            if self.perturb == Some(self.nodes[i].op.kind()) {
                let f = T::of(1.001);
                for v in &mut g {
                    *v *= f;
                }
            }
            self.accumulate_parents(i, &g);
            self.grads[i] = restore;
        }
        self.done = true;
        Ok(())
    }

    /// True once backward has consumed the tape.
    pub fn is_consumed(&self) -> bool {
        self.done
    }

    fn add_into(&mut self, id: TensorId, contrib: &[T]) {
        let g = &mut self.grads[id.0];
        if !g.is_empty() {
            axpy(T::one(), contrib, g);
        }
    }

    fn accumulate_parents(&mut self, i: usize, g: &[T]) {
        // Clone keeps borrows simple; op payloads are a few ids and enums.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(a, g);
                self.reduce_into(b, g);
            }
            Op::Sub(a, b) => {
                self.reduce_into(a, g);
                if !self.grads[b.0].is_empty() {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.reduce_into(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if !self.grads[a.0].is_empty() {
                    let contrib = bcast_map(g, self.nodes[b.0].value.data(), |gi, bv| gi * bv);
                    self.reduce_into(a, &contrib);
                }
                if !self.grads[b.0].is_empty() {
                    let contrib = bcast_map(g, self.nodes[a.0].value.data(), |gi, av| gi * av);
                    self.reduce_into(b, &contrib);
                }
            }
            Op::Div(a, b) => {
                if !self.grads[a.0].is_empty() {
                    let contrib = bcast_map(g, self.nodes[b.0].value.data(), |gi, bv| gi / bv);
                    self.reduce_into(a, &contrib);
                }
                if !self.grads[b.0].is_empty() {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let contrib: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &gi)| {
                            let d = bcast_at(bv, idx);
                            -gi * bcast_at(av, idx) / (d * d)
                        })
                        .collect();
                    self.reduce_into(b, &contrib);
                }
            }
            Op::Affine { a, scale, .. } => {
                let s = T::of(scale);
                self.acc_map(i, a, g, |_, _, gi| gi * s);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                self.acc_map(i, a, g, |_, out, gi| gi * half / out);
            }
            Op::Exp(a) => {
                self.acc_map(i, a, g, |_, out, gi| gi * out);
            }
            Op::Clamp { a, lo, hi } => {
                let (l, h) = (T::of(lo), T::of(hi));
                self.acc_map(i, a, g, |x, _, gi| {
                    if x >= l && x <= h {
                        gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc_map(i, a, g, |_, y, gi| gi * y * (T::one() - y));
            }
            Op::LeakyRelu { a, slope } => {
                let s = T::of(slope);
                self.acc_map(i, a, g, |x, _, gi| if x >= T::zero() { gi } else { gi * s });
            }
            Op::MatMul(a, b) => self.backward_matmul(a, b, g),
            Op::Transpose2d(a) => {
                if self.grads[a.0].is_empty() {
                    return;
                }
                let (c, r) = (self.nodes[i].value.dims()[0], self.nodes[i].value.dims()[1]);
                let mut contrib = vec![T::zero(); g.len()];
                for j in 0..c {
                    for k in 0..r {
                        contrib[k * c + j] = g[j * r + k];
                    }
                }
                self.add_into(a, &contrib);
            }
            Op::Softmax(a) => {
                if self.grads[a.0].is_empty() {
                    return;
                }
                let y = self.nodes[i].value.data();
                let lane = *self.nodes[i].value.dims().last().expect("nonempty dims");
                let mut contrib = vec![T::zero(); g.len()];
                for ((crow, yrow), grow) in contrib
                    .chunks_exact_mut(lane)
                    .zip(y.chunks_exact(lane))
                    .zip(g.chunks_exact(lane))
                {
                    let dot = dot4(grow, yrow);
                    for ((ci, &yi), &gi) in crow.iter_mut().zip(yrow).zip(grow) {
                        *ci = yi * (gi - dot);
                    }
                }
                self.add_into(a, &contrib);
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.acc_fill(a, g0);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let g0 = g[0] / T::of(n as f64);
                self.acc_fill(a, g0);
            }
            Op::Reshape(a) => self.add_into(a, g),
            Op::ConcatChannels(ids) => {
                let od = self.nodes[i].value.grid_dims().expect("grid output");
                let mut offset = 0;
                for &id in &ids {
                    let ck = self.nodes[id.0].value.grid_dims().expect("grid input").c;
                    if !self.grads[id.0].is_empty() {
                        let mut contrib = vec![T::zero(); self.nodes[id.0].value.numel()];
                        for n in 0..od.voxels() {
                            let src = n * od.c + offset;
                            let dst = n * ck;
                            contrib[dst..dst + ck].copy_from_slice(&g[src..src + ck]);
                        }
                        self.add_into(id, &contrib);
                    }
                    offset += ck;
                }
            }
            Op::ShiftDiff { a, axis } => {
                if self.grads[a.0].is_empty() {
                    return;
                }
                let od = self.nodes[i].value.grid_dims().expect("grid output");
                let gd = self.nodes[a.0].value.grid_dims().expect("grid input");
                let (dx, dy, dz) = match axis {
                    Axis::X => (1, 0, 0),
                    Axis::Y => (0, 1, 0),
                    Axis::Z => (0, 0, 1),
                };
                let mut contrib = vec![T::zero(); gd.numel()];
                for z in 0..od.d {
                    for y in 0..od.h {
                        for x in 0..od.w {
                            let o = od.at(0, x, y, z);
                            let i0 = gd.at(0, x, y, z);
                            let i1 = gd.at(0, x + dx, y + dy, z + dz);
                            for c in 0..gd.c {
                                contrib[i0 + c] += g[o + c];
                                contrib[i1 + c] -= g[o + c];
                            }
                        }
                    }
                }
                self.add_into(a, &contrib);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let od = self.nodes[i].value.grid_dims().expect("grid output");
                let id = self.nodes[input.0].value.grid_dims().expect("grid input");
                let kd = KernelDims::from_dims(self.nodes[weight.0].value.dims())
                    .expect("kernel dims");
                let mut gi = self.temp_for(input);
                let mut gw = self.temp_for(weight);
                let mut gb = self.temp_for(bias);
                conv3d_backward(
                    g,
                    od,
                    self.nodes[input.0].value.data(),
                    id,
                    self.nodes[weight.0].value.data(),
                    kd,
                    stride,
                    padding,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.add_temp(input, gi);
                self.add_temp(weight, gw);
                self.add_temp(bias, gb);
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                stride,
            } => {
                let od = self.nodes[i].value.grid_dims().expect("grid output");
                let id = self.nodes[input.0].value.grid_dims().expect("grid input");
                let kd = KernelDims::from_dims(self.nodes[weight.0].value.dims())
                    .expect("kernel dims");
                let mut gi = self.temp_for(input);
                let mut gw = self.temp_for(weight);
                let mut gb = self.temp_for(bias);
                conv_transpose3d_backward(
                    g,
                    od,
                    self.nodes[input.0].value.data(),
                    id,
                    self.nodes[weight.0].value.data(),
                    kd,
                    stride,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.add_temp(input, gi);
                self.add_temp(weight, gw);
                self.add_temp(bias, gb);
            }
            Op::GridSample { vol, disp } => {
                let vd = self.nodes[vol.0].value.grid_dims().expect("grid volume");
                let dd = self.nodes[disp.0].value.grid_dims().expect("grid disp");
                let mut gv = self.temp_for(vol);
                let mut gd = self.temp_for(disp);
                grid_sample_backward(
                    g,
                    self.nodes[vol.0].value.data(),
                    vd,
                    self.nodes[disp.0].value.data(),
                    dd,
                    gv.as_deref_mut(),
                    gd.as_deref_mut(),
                );
                self.add_temp(vol, gv);
                self.add_temp(disp, gd);
            }
            Op::ResizeTrilinear { a, .. } => {
                if self.grads[a.0].is_empty() {
                    return;
                }
                let od = self.nodes[i].value.grid_dims().expect("grid output");
                let gd = self.nodes[a.0].value.grid_dims().expect("grid input");
                let mut contrib = vec![T::zero(); gd.numel()];
                resize_backward(g, od, gd, &mut contrib);
                self.add_into(a, &contrib);
            }
        }
    }

    /// Fresh zero buffer for a parent that tracks gradients, None otherwise.
    fn temp_for(&self, id: TensorId) -> Option<Vec<T>> {
        if self.grads[id.0].is_empty() {
            None
        } else {
            Some(vec![T::zero(); self.nodes[id.0].value.numel()])
        }
    }

    fn add_temp(&mut self, id: TensorId, temp: Option<Vec<T>>) {
        if let Some(t) = temp {
            self.add_into(id, &t);
        }
    }

    /// Adds an output-shaped contribution to `id`'s grad, summing it down
    /// to one element when `id` was a broadcast scalar.
    fn reduce_into(&mut self, id: TensorId, contrib: &[T]) {
        let slot = &mut self.grads[id.0];
        if slot.is_empty() {
            return;
        }
        if slot.len() == contrib.len() {
            axpy(T::one(), contrib, slot);
        } else {
            debug_assert_eq!(slot.len(), 1);
            slot[0] += dot4_ones(contrib);
        }
    }

    /// Elementwise unary backward: contribution is `f(x_in, y_out, g)`.
    fn acc_map(&mut self, i: usize, a: TensorId, g: &[T], f: impl Fn(T, T, T) -> T) {
        if self.grads[a.0].is_empty() {
            return;
        }
        let mut contrib = vec![T::zero(); g.len()];
        {
            let x = self.nodes[a.0].value.data();
            let y = self.nodes[i].value.data();
            for (((ci, &xi), &yi), &gi) in contrib.iter_mut().zip(x).zip(y).zip(g) {
                *ci = f(xi, yi, gi);
            }
        }
        self.add_into(a, &contrib);
    }

    fn backward_matmul(&mut self, a: TensorId, b: TensorId, g: &[T]) {
        let (r, k) = (
            self.nodes[a.0].value.dims()[0],
            self.nodes[a.0].value.dims()[1],
        );
        let c = self.nodes[b.0].value.dims()[1];
        if !self.grads[a.0].is_empty() {
            let bv = self.nodes[b.0].value.data();
            let mut contrib = vec![T::zero(); r * k];
            for i in 0..r {
                let g_row = &g[i * c..(i + 1) * c];
                let c_row = &mut contrib[i * k..(i + 1) * k];
                for (kk, cv) in c_row.iter_mut().enumerate() {
                    *cv = dot4(g_row, &bv[kk * c..(kk + 1) * c]);
                }
            }
            self.add_into(a, &contrib);
        }
        if !self.grads[b.0].is_empty() {
            let av = self.nodes[a.0].value.data();
            let mut contrib = vec![T::zero(); k * c];
            for i in 0..r {
                let g_row = &g[i * c..(i + 1) * c];
                for kk in 0..k {
                    axpy(av[i * k + kk], g_row, &mut contrib[kk * c..(kk + 1) * c]);
                }
            }
            self.add_into(b, &contrib);
        }
    }

    fn acc_fill(&mut self, a: TensorId, v: T) {
        let g = &mut self.grads[a.0];
        if !g.is_empty() {
            for gi in g.iter_mut() {
                *gi += v;
            }
        }
    }
}

#[inline]
fn bcast_at<T: Copy>(v: &[T], i: usize) -> T {
    v[if v.len() == 1 { 0 } else { i }]
}

/// Output-shaped `f(g[i], v[i_or_0])` with scalar broadcast on `v`.
fn bcast_map<T: Real>(g: &[T], v: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter()
        .enumerate()
        .map(|(i, &gi)| f(gi, bcast_at(v, i)))
        .collect()
}

/// Plain sum with the same 4-chain order as dot4.
#[inline]
fn dot4_ones<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    for ca in a.chunks_exact(4) {
        acc[0] += ca[0];
        acc[1] += ca[1];
        acc[2] += ca[2];
        acc[3] += ca[3];
    }
    let mut tail = T::zero();
    for &xa in a.chunks_exact(4).remainder() {
        tail += xa;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
