//! Ground-truth registration pairs: the fixed image is the moving phantom
//! warped by a known diffeomorphic flow, built the same way the network
//! builds its flows (half-resolution stationary velocity, scaling and
//! squaring, upsample). The flow is narrowed to f32 before the warp so a
//! reloaded case reproduces the fixed image and labels exactly.

use std::fs;
use std::path::Path;

use crate::metrics::{warp_labels, LabelVolume};
use crate::regnet::{integrate_svf, upsample_flow, FieldResolution};
use crate::rng::{derive, Stream};
use crate::tensor::{GridDims, Tape, Value};
use crate::volio::format::{read_labels, read_volume, write_labels, write_volume};
use crate::volio::phantom::{gaussian_blur, generate_phantom};
use crate::volio::Volume;
use crate::{Error, Result};

const VELOCITY_SMOOTH_SIGMA: f64 = 2.0;
const INTEGRATION_STEPS: u32 = 7;

/// One synthetic registration case. `fixed` and `fixed_labels` are derived
/// from `moving` and the stored `gt_flow`, so the warp consistency survives a
/// roundtrip through disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub seed: u64,
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: LabelVolume,
    pub fixed_labels: LabelVolume,
    pub gt_flow: Volume,
}

/// Build a case: phantom, smooth random velocity at half resolution capped at
/// `max_disp_voxels`, integrated and upsampled into a foldless flow.
pub fn generate_gt_pair(
    seed: u64,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    max_disp_voxels: f64,
) -> Result<SynthCase> {
    let [w, h, d] = shape;
    if w % 2 != 0 || h % 2 != 0 || d % 2 != 0 {
        return Err(Error::usage(format!(
            "shape {shape:?} must have even extents for the half-resolution flow"
        )));
    }
    if !(max_disp_voxels.is_finite() && max_disp_voxels >= 0.0) {
        return Err(Error::usage(format!(
            "max displacement must be finite and non-negative, got {max_disp_voxels}"
        )));
    }
    let (moving, moving_labels) = generate_phantom(seed, shape, spacing_mm)?;

    let mut rng = derive(seed, Stream::GroundTruthFlow);
    let half = [w / 2, h / 2, d / 2];
    let mut z = Value::grid(GridDims::new(3, half[0], half[1], half[2]));
    z.fill_std_normal(&mut rng, 1.0);
    gaussian_blur(z.data_mut(), half, 3, VELOCITY_SMOOTH_SIGMA);
    let peak = z.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_disp_voxels == 0.0 || peak == 0.0 {
        for v in z.data_mut() {
            *v = 0.0;
        }
    } else {
        let scale = max_disp_voxels / peak;
        for v in z.data_mut() {
            *v *= scale;
        }
    }

    let mut tape = Tape::<f64>::new();
    let z_id = tape.constant(z)?;
    let field = integrate_svf(&mut tape, z_id, INTEGRATION_STEPS, FieldResolution::Half)?;
    let full = upsample_flow(&mut tape, &field)?;
    let gt_flow = Volume::from_value(tape.value(full.disp), spacing_mm)?;

    // Warp from the narrowed flow, not the f64 one the tape produced: a
    // reloaded case must reproduce these exact volumes.
    let stored_flow = gt_flow.to_value();
    let mut warp_tape = Tape::<f64>::new();
    let moving_id = warp_tape.constant(moving.to_value())?;
    let flow_id = warp_tape.constant(stored_flow.clone())?;
    let warped = warp_tape.grid_sample(moving_id, flow_id)?;
    let fixed = Volume::from_value(warp_tape.value(warped), spacing_mm)?;
    let fixed_labels = warp_labels(&moving_labels, &stored_flow)?;

    Ok(SynthCase { seed, moving, fixed, moving_labels, fixed_labels, gt_flow })
}

const CASE_STEMS: [&str; 5] = ["moving", "fixed", "moving_labels", "fixed_labels", "gt_flow"];

/// Write the five volumes of a case into `dir` (ten files).
pub fn save_case(dir: &Path, case: &SynthCase) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_volume(&case.moving, &dir.join(CASE_STEMS[0]))?;
    write_volume(&case.fixed, &dir.join(CASE_STEMS[1]))?;
    write_labels(&case.moving_labels, &dir.join(CASE_STEMS[2]))?;
    write_labels(&case.fixed_labels, &dir.join(CASE_STEMS[3]))?;
    write_volume(&case.gt_flow, &dir.join(CASE_STEMS[4]))?;
    Ok(())
}

/// Read a case back. The seed is directory metadata, not file content, so the
/// caller supplies it.
pub fn load_case(dir: &Path, seed: u64) -> Result<SynthCase> {
    Ok(SynthCase {
        seed,
        moving: read_volume(&dir.join(CASE_STEMS[0]))?,
        fixed: read_volume(&dir.join(CASE_STEMS[1]))?,
        moving_labels: read_labels(&dir.join(CASE_STEMS[2]))?,
        fixed_labels: read_labels(&dir.join(CASE_STEMS[3]))?,
        gt_flow: read_volume(&dir.join(CASE_STEMS[4]))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_extents_are_rejected() {
        assert!(matches!(
            generate_gt_pair(0, [32, 32, 15], [1.0; 3], 3.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn flow_peak_tracks_the_velocity_cap() {
        let case = generate_gt_pair(1, [32, 32, 16], [1.0; 3], 2.0).unwrap();
        let peak = case.gt_flow.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        // Upsampling doubles the voxel units; squaring can overshoot a bit.
        assert!(peak > 1.0 && peak < 6.0, "flow peak {peak} out of band");
    }
}
