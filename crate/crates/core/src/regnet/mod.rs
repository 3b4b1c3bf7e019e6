//! The registration network: shared-stem feature extraction, co-attention,
//! a half-resolution U-Net over the concatenated maps, velocity heads,
//! scaling-and-squaring integration, and the full-resolution warp.

mod config;
mod net;

pub use config::{NetworkConfig, NetworkGeometry, ATTENTION_BUDGET};
pub use net::{
    extract_features, integrate_svf, predict_flow_distribution, register_pair, sample_velocity,
    upsample_flow, AttentionPath, DeformationField, FieldResolution, RegNetParams, Registration,
    SampleMode, TapedRegNet,
};

use crate::error::{Error, Result};
use crate::tensor::{GridDims, Real, Tape, TensorId};

/// Diagonal Gaussian over the half-resolution stationary velocity field.
/// `log_var` is clamped to [-20, 5] here, once, so both the KL term and
/// the reparameterized sample exponentiate the same bounded tensor.
#[derive(Debug, Clone, Copy)]
pub struct FlowDistribution {
    pub mu: TensorId,
    pub log_var: TensorId,
    dims: GridDims,
}

impl FlowDistribution {
    pub fn new<T: Real>(
        tape: &mut Tape<T>,
        mu: TensorId,
        raw_log_var: TensorId,
    ) -> Result<Self> {
        let md = tape.value(mu).grid_dims()?;
        let ld = tape.value(raw_log_var).grid_dims()?;
        if md != ld {
            return Err(Error::shape(format!(
                "mu dims {md:?} differ from log_var dims {ld:?}"
            )));
        }
        if md.c != 3 {
            return Err(Error::shape(format!(
                "velocity distribution needs 3 channels, got {}",
                md.c
            )));
        }
        let log_var = tape.clamp(raw_log_var, -20.0, 5.0)?;
        Ok(FlowDistribution {
            mu,
            log_var,
            dims: md,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }
}
