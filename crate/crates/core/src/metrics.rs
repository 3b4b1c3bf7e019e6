//! Evaluation metrics on detached host grids: per-structure Dice overlap,
//! symmetric Hausdorff distance between boundary voxel centres in
//! millimetres, Jacobian determinant analysis of a displacement field, and
//! pull-based nearest-neighbour label warping.

use serde::{Deserialize, Serialize};

use crate::tensor::{GridDims, Value};
use crate::{Error, Result};

/// Anatomical structures encoded in label volumes, by integer id.
pub const STRUCTURES: [(u8, &str); 3] = [(1, "LVBP"), (2, "LVM"), (3, "RV")];

/// Largest admissible label value (background plus the three structures).
pub const MAX_LABEL: u8 = 3;

/// Display name of a structure id, rejecting background and unknown ids.
pub fn structure_name(label: u8) -> Result<&'static str> {
    match STRUCTURES.iter().find(|(id, _)| *id == label) {
        Some((_, name)) => Ok(name),
        None if label == 0 => Err(Error::usage("label 0 is the background, not a structure")),
        None => Err(Error::usage(format!(
            "unknown structure id {label}; expected 1 (LVBP), 2 (LVM) or 3 (RV)"
        ))),
    }
}

/// Integer segmentation on a W x H x D grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], spacing_mm: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::shape(format!("label volume extents {extents:?} contain zero")));
        }
        let n = extents[0] * extents[1] * extents[2];
        if labels.len() != n {
            return Err(Error::shape(format!(
                "label volume {extents:?} needs {n} voxels, got {}",
                labels.len()
            )));
        }
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::usage(format!(
                "voxel spacing must be finite and positive, got {spacing_mm:?}"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > MAX_LABEL) {
            return Err(Error::data(format!(
                "label value {bad} outside the declared set 0..={MAX_LABEL}"
            )));
        }
        Ok(LabelVolume { extents, spacing_mm, labels })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[x + self.extents[0] * (y + self.extents[1] * z)]
    }
}

/// Pull-based nearest-neighbour warp: `out(x) = labels(round(x + disp(x)))`
/// with the sample position clamped to the grid, matching the trilinear
/// warp's border policy. Rounding is half away from zero.
pub fn warp_labels(labels: &LabelVolume, disp: &Value<f64>) -> Result<LabelVolume> {
    let gd = disp.grid_dims()?;
    let [w, h, d] = labels.extents;
    if gd.c != 3 || [gd.w, gd.h, gd.d] != labels.extents {
        return Err(Error::shape(format!(
            "displacement grid {:?} does not cover a 3-channel field on {:?}",
            disp.dims(),
            labels.extents
        )));
    }
    let data = disp.data();
    let mut out = vec![0u8; labels.labels.len()];
    let pull = |pos: f64, extent: usize| -> usize {
        pos.round().clamp(0.0, (extent - 1) as f64) as usize
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sx = pull(x as f64 + data[gd.at(0, x, y, z)], w);
                let sy = pull(y as f64 + data[gd.at(1, x, y, z)], h);
                let sz = pull(z as f64 + data[gd.at(2, x, y, z)], d);
                out[x + w * (y + h * z)] = labels.at(sx, sy, sz);
            }
        }
    }
    Ok(LabelVolume { extents: labels.extents, spacing_mm: labels.spacing_mm, labels: out })
}

/// Dice overlap `2|A n B| / (|A| + |B|)` of one structure. Both masks empty
/// count as perfect agreement, exactly one empty as total disagreement.
pub fn dice(a: &LabelVolume, b: &LabelVolume, structure: u8) -> Result<f64> {
    structure_name(structure)?;
    if a.extents != b.extents {
        return Err(Error::shape(format!(
            "label volumes {:?} and {:?} differ in extent",
            a.extents, b.extents
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut shared = 0usize;
    for (&va, &vb) in a.labels.iter().zip(&b.labels) {
        let ia = va == structure;
        let ib = vb == structure;
        na += ia as usize;
        nb += ib as usize;
        shared += (ia && ib) as usize;
    }
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * shared as f64 / (na + nb) as f64,
    })
}

/// Physical centres of mask voxels with at least one six-neighbour outside
/// the mask; voxels beyond the grid count as outside.
fn boundary_points(v: &LabelVolume, keep: &dyn Fn(u8) -> bool) -> Vec<[f64; 3]> {
    let [w, h, d] = v.extents;
    let inside = |x: isize, y: isize, z: isize| -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < w
            && (y as usize) < h
            && (z as usize) < d
            && keep(v.at(x as usize, y as usize, z as usize))
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !inside(x, y, z) {
                    continue;
                }
                let exposed = !(inside(x - 1, y, z)
                    && inside(x + 1, y, z)
                    && inside(x, y - 1, z)
                    && inside(x, y + 1, z)
                    && inside(x, y, z - 1)
                    && inside(x, y, z + 1));
                if exposed {
                    let sp = v.spacing_mm;
                    pts.push([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]);
                }
            }
        }
    }
    pts
}

fn directed_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn hausdorff_masks(
    a: &LabelVolume,
    b: &LabelVolume,
    keep: &dyn Fn(u8) -> bool,
    what: &str,
) -> Result<f64> {
    if a.extents != b.extents {
        return Err(Error::shape(format!(
            "label volumes {:?} and {:?} differ in extent",
            a.extents, b.extents
        )));
    }
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::usage(format!(
            "voxel spacings {:?} and {:?} differ; physical distances are undefined",
            a.spacing_mm, b.spacing_mm
        )));
    }
    let pa = boundary_points(a, keep);
    let pb = boundary_points(b, keep);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::data(format!("{what} mask is empty; Hausdorff distance is undefined")));
    }
    Ok(directed_sq(&pa, &pb).max(directed_sq(&pb, &pa)).sqrt())
}

/// Classical symmetric Hausdorff distance of one structure in millimetres,
/// measured between boundary voxel centres.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, structure: u8) -> Result<f64> {
    let name = structure_name(structure)?;
    hausdorff_masks(a, b, &|v| v == structure, name)
}

/// Jacobian determinant summary of a displacement field.
#[derive(Debug, Clone)]
pub struct JacobianAnalysis {
    /// Single-channel determinant map at full extent; face voxels, which
    /// have no central difference, hold the identity value 1.
    pub det_map: Value<f64>,
    /// Interior voxels with `det <= 0`.
    pub foldings: usize,
    /// Smallest interior determinant.
    pub jacobian_min: f64,
}

/// Determinant of `J(x) = I + grad u(x)` by central differences on interior
/// voxels and 3x3 cofactor expansion. Faces are excluded from the counts.
pub fn jacobian_analysis(disp: &Value<f64>) -> Result<JacobianAnalysis> {
    let gd = disp.grid_dims()?;
    if gd.c != 3 {
        return Err(Error::shape(format!(
            "displacement grid {:?} must have 3 channels",
            disp.dims()
        )));
    }
    if gd.w < 3 || gd.h < 3 || gd.d < 3 {
        return Err(Error::usage(format!(
            "Jacobian analysis needs interior voxels: every extent of {:?} must be at least 3",
            [gd.w, gd.h, gd.d]
        )));
    }
    let out_gd = GridDims::new(1, gd.w, gd.h, gd.d);
    let mut det_map = Value::grid(out_gd);
    det_map.data_mut().fill(1.0);
    let data = disp.data();
    let mut foldings = 0usize;
    let mut jacobian_min = f64::INFINITY;
    for z in 1..gd.d - 1 {
        for y in 1..gd.h - 1 {
            for x in 1..gd.w - 1 {
                let mut j = [[0.0f64; 3]; 3];
                for c in 0..3 {
                    j[c][0] = (data[gd.at(c, x + 1, y, z)] - data[gd.at(c, x - 1, y, z)]) / 2.0;
                    j[c][1] = (data[gd.at(c, x, y + 1, z)] - data[gd.at(c, x, y - 1, z)]) / 2.0;
                    j[c][2] = (data[gd.at(c, x, y, z + 1)] - data[gd.at(c, x, y, z - 1)]) / 2.0;
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                det_map.data_mut()[out_gd.at(0, x, y, z)] = det;
                foldings += (det <= 0.0) as usize;
                jacobian_min = jacobian_min.min(det);
            }
        }
    }
    Ok(JacobianAnalysis { det_map, foldings, jacobian_min })
}

/// Quality summary of one registered case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub lvbp_dice: f64,
    pub lvm_dice: f64,
    pub rv_dice: f64,
    pub avg_dice: f64,
    pub lvbp_hd_mm: f64,
    pub lvm_hd_mm: f64,
    pub rv_hd_mm: f64,
    /// Hausdorff distance of the whole foreground mask.
    pub hd_mm: f64,
    pub foldings: usize,
    pub jacobian_min: f64,
}

/// Compare warped labels against the fixed reference and analyse the
/// full-resolution displacement that produced them.
pub fn evaluate_pair(
    warped: &LabelVolume,
    fixed: &LabelVolume,
    disp: &Value<f64>,
) -> Result<EvalReport> {
    let gd = disp.grid_dims()?;
    if [gd.w, gd.h, gd.d] != warped.extents {
        return Err(Error::shape(format!(
            "displacement extents {:?} do not match the label volumes {:?}",
            [gd.w, gd.h, gd.d],
            warped.extents
        )));
    }
    let lvbp_dice = dice(warped, fixed, 1)?;
    let lvm_dice = dice(warped, fixed, 2)?;
    let rv_dice = dice(warped, fixed, 3)?;
    let jac = jacobian_analysis(disp)?;
    Ok(EvalReport {
        lvbp_dice,
        lvm_dice,
        rv_dice,
        avg_dice: (lvbp_dice + lvm_dice + rv_dice) / 3.0,
        lvbp_hd_mm: hausdorff(warped, fixed, 1)?,
        lvm_hd_mm: hausdorff(warped, fixed, 2)?,
        rv_hd_mm: hausdorff(warped, fixed, 3)?,
        hd_mm: hausdorff_masks(warped, fixed, &|v| v > 0, "foreground")?,
        foldings: jac.foldings,
        jacobian_min: jac.jacobian_min,
    })
}
