//! Network configuration and the derived multi-resolution geometry.
//!
//! Geometry is computed and validated once, at construction. The x and y
//! extents must support the full requested U-Net depth; the z extent may
//! support fewer halvings, in which case deeper levels keep z stride 1.
//! That per-axis clamping is explicit in the geometry, never silent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Picked so the desk-scale default fits comfortably in memory; the
/// similarity matrix is N x N at quarter resolution.
pub const ATTENTION_BUDGET: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Full-resolution volume extents (W, H, D) in voxels.
    pub in_shape: [usize; 3],
    /// Channel widths of the two shared stem convolutions.
    pub stem_channels: [usize; 2],
    /// Channel width of the co-attention projections.
    pub att_channels: usize,
    /// Number of U-Net down/up levels below half resolution.
    pub unet_depth: usize,
    /// Encoder channel width per U-Net level.
    pub unet_channels: Vec<usize>,
    /// Scaling-and-squaring steps K.
    pub integration_steps: u32,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_shape: [32, 32, 16],
            stem_channels: [8, 16],
            att_channels: 16,
            unet_depth: 3,
            unet_channels: vec![32, 32, 32],
            integration_steps: 7,
            seed: 0,
        }
    }
}

/// Spatial extents at every stage, validated against the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGeometry {
    pub full: [usize; 3],
    pub half: [usize; 3],
    pub quarter: [usize; 3],
    /// Deepest level index whose z axis is still halved.
    pub z_depth: usize,
    /// Per-level stride triples for the U-Net encoder (decoder mirrors).
    pub level_strides: Vec<[usize; 3]>,
    /// Spatial extents entering each level; index 0 is half resolution,
    /// index `unet_depth` is the bottleneck.
    pub level_spatial: Vec<[usize; 3]>,
}

impl NetworkConfig {
    /// Validates divisibility and budgets, returning the stage geometry.
    pub fn geometry(&self) -> Result<NetworkGeometry> {
        let [w, h, d] = self.in_shape;
        if self.integration_steps < 1 {
            return Err(Error::usage("integration_steps must be at least 1"));
        }
        if self.unet_channels.len() != self.unet_depth {
            return Err(Error::shape(format!(
                "unet_channels has {} entries for unet_depth {}",
                self.unet_channels.len(),
                self.unet_depth
            )));
        }
        if self.stem_channels.iter().any(|&c| c == 0)
            || self.att_channels == 0
            || self.unet_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::shape("channel widths must be positive"));
        }
        let need_xy = 4usize << self.unet_depth;
        for (name, extent) in [("W", w), ("H", h)] {
            if extent == 0 || extent % need_xy != 0 {
                return Err(Error::shape(format!(
                    "{name}={extent} must be a positive multiple of {need_xy} \
                     (stem /4 plus {} U-Net halvings with a >=2-voxel bottleneck)",
                    self.unet_depth
                )));
            }
        }
        if d == 0 || d % 4 != 0 {
            return Err(Error::shape(format!(
                "D={d} must be a positive multiple of 4 (two stem halvings)"
            )));
        }
        let z_depth = (0..=self.unet_depth)
            .rev()
            .find(|&l| d % (4usize << l) == 0)
            .expect("l=0 divides since d % 4 == 0");
        let n_att = (w / 4) * (h / 4) * (d / 4);
        if n_att > ATTENTION_BUDGET {
            return Err(Error::resource(format!(
                "co-attention needs an {n_att} x {n_att} similarity matrix, over the \
                 {ATTENTION_BUDGET}-position budget; reduce in_shape or raise the budget"
            )));
        }
        let mut level_strides = Vec::with_capacity(self.unet_depth);
        let mut level_spatial = vec![[w / 2, h / 2, d / 2]];
        for l in 0..self.unet_depth {
            let sz = if l < z_depth { 2 } else { 1 };
            level_strides.push([2, 2, sz]);
            let prev = level_spatial[l];
            level_spatial.push([prev[0] / 2, prev[1] / 2, prev[2] / sz]);
        }
        Ok(NetworkGeometry {
            full: [w, h, d],
            half: [w / 2, h / 2, d / 2],
            quarter: [w / 4, h / 4, d / 4],
            z_depth,
            level_strides,
            level_spatial,
        })
    }
}
