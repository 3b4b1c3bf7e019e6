//! Cross-volume attention block. Both feature maps are projected by
//! 1x1x1 convolutions, flattened to rows, and exchanged through a dense
//! N x N similarity matrix; each side then receives a sigmoid-gated,
//! alpha-scaled residual of its own projection. Alpha starts at 0, so an
//! untrained block is exactly a pair of per-voxel projections.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ConvParam, TapedConv};
use crate::regnet::ATTENTION_BUDGET;
use crate::tensor::{GridDims, KernelDims, Padding, Real, Tape, TensorId, Value};

#[derive(Debug, Clone)]
pub struct CoAttentionParams<T> {
    pub f: ConvParam<T>,
    pub g: ConvParam<T>,
    pub h1: ConvParam<T>,
    pub h2: ConvParam<T>,
    pub gate_mov: ConvParam<T>,
    pub gate_fix: ConvParam<T>,
    pub alpha_mov: Value<T>,
    pub alpha_fix: Value<T>,
}

/// Tape handles in visit order.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapedCoAttention {
    pub f: TapedConv,
    pub g: TapedConv,
    pub h1: TapedConv,
    pub h2: TapedConv,
    pub gate_mov: TapedConv,
    pub gate_fix: TapedConv,
    pub alpha_mov: TensorId,
    pub alpha_fix: TensorId,
}

impl TapedCoAttention {
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        vec![
            self.f.weight,
            self.f.bias,
            self.g.weight,
            self.g.bias,
            self.h1.weight,
            self.h1.bias,
            self.h2.weight,
            self.h2.bias,
            self.gate_mov.weight,
            self.gate_mov.bias,
            self.gate_fix.weight,
            self.gate_fix.bias,
            self.alpha_mov,
            self.alpha_fix,
        ]
    }
}

impl<T: Real> CoAttentionParams<T> {
    /// He-initialized projections and gates, blend weights at zero.
    pub fn init(c_in: usize, c_att: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = KernelDims { c_out: c_att, c_in, kx: 1, ky: 1, kz: 1 };
        let gate = KernelDims { c_out: c_att, c_in: c_att, kx: 1, ky: 1, kz: 1 };
        CoAttentionParams {
            f: ConvParam::he(proj, rng),
            g: ConvParam::he(proj, rng),
            h1: ConvParam::he(proj, rng),
            h2: ConvParam::he(proj, rng),
            gate_mov: ConvParam::he(gate, rng),
            gate_fix: ConvParam::he(gate, rng),
            alpha_mov: Value::scalar(T::of(0.0)),
            alpha_fix: Value::scalar(T::of(0.0)),
        }
    }

    pub fn push(&self, tape: &mut Tape<T>, trainable: bool) -> Result<TapedCoAttention> {
        Ok(TapedCoAttention {
            f: self.f.push(tape, trainable)?,
            g: self.g.push(tape, trainable)?,
            h1: self.h1.push(tape, trainable)?,
            h2: self.h2.push(tape, trainable)?,
            gate_mov: self.gate_mov.push(tape, trainable)?,
            gate_fix: self.gate_fix.push(tape, trainable)?,
            alpha_mov: tape.leaf(self.alpha_mov.clone(), trainable)?,
            alpha_fix: tape.leaf(self.alpha_fix.clone(), trainable)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Value<T>)) {
        self.f.visit(&format!("{prefix}.f"), f);
        self.g.visit(&format!("{prefix}.g"), f);
        self.h1.visit(&format!("{prefix}.h1"), f);
        self.h2.visit(&format!("{prefix}.h2"), f);
        self.gate_mov.visit(&format!("{prefix}.gate_mov"), f);
        self.gate_fix.visit(&format!("{prefix}.gate_fix"), f);
        f(&format!("{prefix}.alpha_mov"), &self.alpha_mov);
        f(&format!("{prefix}.alpha_fix"), &self.alpha_fix);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Value<T>)) {
        self.f.visit_mut(&format!("{prefix}.f"), f);
        self.g.visit_mut(&format!("{prefix}.g"), f);
        self.h1.visit_mut(&format!("{prefix}.h1"), f);
        self.h2.visit_mut(&format!("{prefix}.h2"), f);
        self.gate_mov.visit_mut(&format!("{prefix}.gate_mov"), f);
        self.gate_fix.visit_mut(&format!("{prefix}.gate_fix"), f);
        f(&format!("{prefix}.alpha_mov"), &mut self.alpha_mov);
        f(&format!("{prefix}.alpha_fix"), &mut self.alpha_fix);
    }
}

/// Everything the block computes, kept addressable for inspection dumps.
#[derive(Debug, Clone, Copy)]
pub struct CoAttentionOutput {
    /// Dense similarity matrix, rows indexed by moving-volume voxels.
    pub s: TensorId,
    pub att_mov: TensorId,
    pub att_fix: TensorId,
    /// Sigmoid gate maps, already squashed to (0, 1).
    pub gate_mov: TensorId,
    pub gate_fix: TensorId,
    pub o_mov: TensorId,
    pub o_fix: TensorId,
}

pub fn co_attention_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &TapedCoAttention,
    feat_mov: TensorId,
    feat_fix: TensorId,
) -> Result<CoAttentionOutput> {
    let md = tape.value(feat_mov).grid_dims()?;
    let fd = tape.value(feat_fix).grid_dims()?;
    if md != fd {
        return Err(Error::shape(format!(
            "attention inputs differ: {:?} vs {:?}",
            md.dims(),
            fd.dims()
        )));
    }
    let n = md.voxels();
    if n > ATTENTION_BUDGET {
        return Err(Error::resource(format!(
            "attention grid has {n} voxels, budget is {ATTENTION_BUDGET}; \
             shrink the input or deepen the downsampling stem"
        )));
    }

    let one = [1, 1, 1];
    let fm = tape.conv3d(feat_mov, params.f.weight, params.f.bias, one, Padding::Same)?;
    let gf = tape.conv3d(feat_fix, params.g.weight, params.g.bias, one, Padding::Same)?;
    let h1m = tape.conv3d(feat_mov, params.h1.weight, params.h1.bias, one, Padding::Same)?;
    let h2f = tape.conv3d(feat_fix, params.h2.weight, params.h2.bias, one, Padding::Same)?;
    let c_att = tape.value(fm).grid_dims()?.c;

    // The channel-fastest layout makes [N, C_att] rows a free reshape.
    let fm_rows = tape.reshape(fm, vec![n, c_att])?;
    let gf_rows = tape.reshape(gf, vec![n, c_att])?;
    let h1_rows = tape.reshape(h1m, vec![n, c_att])?;
    let h2_rows = tape.reshape(h2f, vec![n, c_att])?;

    let gf_cols = tape.transpose2d(gf_rows)?;
    let s = tape.matmul(fm_rows, gf_cols)?;
    let a_mov = tape.softmax(s)?;
    let att_mov_rows = tape.matmul(a_mov, h2_rows)?;
    let s_t = tape.transpose2d(s)?;
    let a_fix = tape.softmax(s_t)?;
    let att_fix_rows = tape.matmul(a_fix, h1_rows)?;

    let att_dims = GridDims::new(c_att, md.w, md.h, md.d).dims();
    let att_mov = tape.reshape(att_mov_rows, att_dims.clone())?;
    let att_fix = tape.reshape(att_fix_rows, att_dims)?;

    let gm_pre =
        tape.conv3d(att_mov, params.gate_mov.weight, params.gate_mov.bias, one, Padding::Same)?;
    let gate_mov = tape.sigmoid(gm_pre)?;
    let gf_pre =
        tape.conv3d(att_fix, params.gate_fix.weight, params.gate_fix.bias, one, Padding::Same)?;
    let gate_fix = tape.sigmoid(gf_pre)?;

    let o_mov = gated_residual(tape, h1m, gate_mov, params.alpha_mov)?;
    let o_fix = gated_residual(tape, h2f, gate_fix, params.alpha_fix)?;

    Ok(CoAttentionOutput { s, att_mov, att_fix, gate_mov, gate_fix, o_mov, o_fix })
}

/// Ablation path: only the direct per-voxel projections, skipping the
/// similarity exchange. Bit-identical to the full block at alpha = 0.
pub fn co_attention_bypass<T: Real>(
    tape: &mut Tape<T>,
    params: &TapedCoAttention,
    feat_mov: TensorId,
    feat_fix: TensorId,
) -> Result<(TensorId, TensorId)> {
    let one = [1, 1, 1];
    let o_mov = tape.conv3d(feat_mov, params.h1.weight, params.h1.bias, one, Padding::Same)?;
    let o_fix = tape.conv3d(feat_fix, params.h2.weight, params.h2.bias, one, Padding::Same)?;
    Ok((o_mov, o_fix))
}

/// h + alpha * gate (*) h. At alpha = +0 every blended element is a zero
/// carrying h's sign, so the addition returns h bit-for-bit.
fn gated_residual<T: Real>(
    tape: &mut Tape<T>,
    h: TensorId,
    gate: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let scaled = tape.mul(alpha, gate)?;
    let blended = tape.mul(scaled, h)?;
    tape.add(h, blended)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive1, Stream};

    #[test]
    fn init_shapes_and_visit_order() {
        let mut rng = derive1(7, Stream::WeightInit, 0);
        let p = CoAttentionParams::<f64>::init(16, 8, &mut rng);
        assert_eq!(p.f.weight.dims(), &[8, 1, 1, 1, 16]);
        assert_eq!(p.gate_mov.weight.dims(), &[8, 1, 1, 1, 8]);
        let mut names = Vec::new();
        p.visit("coatt", &mut |n, _| names.push(n.to_string()));
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "coatt.f.weight");
        assert_eq!(names[12], "coatt.alpha_mov");

        let mut t = Tape::<f64>::new();
        let taped = p.push(&mut t, true).unwrap();
        assert_eq!(taped.leaf_ids().len(), names.len());
    }
}
