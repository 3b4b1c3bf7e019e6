//! Flag parsing, the dataset manifest, and the shared inference pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use coreg::regnet::{register_pair, AttentionPath, NetworkConfig, RegNetParams, SampleMode};
use coreg::rng::{derive1, Stream};
use coreg::tensor::{Real, Tape, Value};
use coreg::volio::{load_case, SynthCase, Volume};
use coreg::{Error, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Inference precision, overridable via `COREG_PRECISION=f32|f64`.
/// Training always runs f32: checkpoints store the exact working precision
/// so a resumed run can continue bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn precision_from_env() -> Result<Precision> {
    match std::env::var("COREG_PRECISION") {
        Err(std::env::VarError::NotPresent) => Ok(Precision::F32),
        Err(e) => Err(Error::usage(format!("COREG_PRECISION: {e}"))),
        Ok(s) => match s.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => {
                Err(Error::usage(format!("COREG_PRECISION must be f32 or f64, got {other:?}")))
            }
        },
    }
}

pub fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected WxHxD like 32x32x16, got {s:?}"));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| format!("bad extent {part:?} in {s:?}"))?;
        if *slot == 0 {
            return Err(format!("extents must be positive, got {s:?}"));
        }
    }
    Ok(dims)
}

pub fn parse_spacing(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected sx,sy,sz like 1.5,1.5,3.15, got {s:?}"));
    }
    let mut sp = [0f64; 3];
    for (slot, part) in sp.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| format!("bad spacing {part:?} in {s:?}"))?;
        if !(slot.is_finite() && *slot > 0.0) {
            return Err(format!("spacing must be positive, got {s:?}"));
        }
    }
    Ok(sp)
}

pub fn parse_channel_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let out: std::result::Result<Vec<usize>, _> =
        s.split(',').map(|p| p.parse::<usize>()).collect();
    match out {
        Ok(v) if !v.is_empty() && v.iter().all(|&c| c > 0) => Ok(v),
        _ => Err(format!("expected positive channel counts like 16,16, got {s:?}")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub seed: u64,
}

/// Written by `synth` next to the case directories; `train` and `evaluate`
/// discover cases through it.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub max_disp: f64,
    pub cases: Vec<CaseEntry>,
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::data(format!("manifest encoding: {e}")))?;
    std::fs::write(dir.join(DATASET_MANIFEST), bytes)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::data(format!("malformed {}: {e}", path.display())))
}

/// Same error kind, message prefixed with the offending case.
fn in_case(name: &str, e: Error) -> Error {
    let msg = format!("case {name}: {e}");
    match e {
        Error::Usage(_) => Error::usage(msg),
        Error::Numeric(_) => Error::numeric(msg),
        _ => Error::data(msg),
    }
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SynthCase>)> {
    let manifest = read_manifest(dir)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        let case =
            load_case(&dir.join(&entry.name), entry.seed).map_err(|e| in_case(&entry.name, e))?;
        cases.push(case);
    }
    Ok((manifest, cases))
}

/// Bridges `Volume` (always f32 on disk) to the requested working precision.
pub trait WorkingScalar: Real {
    fn from_volume(v: &Volume) -> Value<Self>;
    fn into_volume(v: &Value<Self>, spacing_mm: [f64; 3]) -> Result<Volume>;
}

impl WorkingScalar for f32 {
    fn from_volume(v: &Volume) -> Value<f32> {
        v.to_value_f32()
    }
    fn into_volume(v: &Value<f32>, spacing_mm: [f64; 3]) -> Result<Volume> {
        Volume::from_value_f32(v, spacing_mm)
    }
}

impl WorkingScalar for f64 {
    fn from_volume(v: &Volume) -> Value<f64> {
        v.to_value()
    }
    fn into_volume(v: &Value<f64>, spacing_mm: [f64; 3]) -> Result<Volume> {
        Volume::from_value(v, spacing_mm)
    }
}

pub struct AttentionDump {
    pub gate_mov: Volume,
    pub gate_fix: Volume,
    pub o_mov: Volume,
    pub o_fix: Volume,
    pub alpha_mov: f64,
    pub alpha_fix: f64,
}

pub struct RegOutputs {
    pub warped: Volume,
    pub flow: Volume,
    pub attention: Option<AttentionDump>,
}

pub fn check_pair_against_config(
    config: &NetworkConfig,
    moving: &Volume,
    fixed: &Volume,
) -> Result<()> {
    for (name, v) in [("moving", moving), ("fixed", fixed)] {
        if v.extents() != config.in_shape {
            return Err(Error::shape(format!(
                "{name} volume extents {:?} do not match the checkpoint's input shape {:?}",
                v.extents(),
                config.in_shape
            )));
        }
        if v.channels() != 1 {
            return Err(Error::shape(format!(
                "{name} volume has {} channels, the network registers single-channel volumes",
                v.channels()
            )));
        }
    }
    if moving.spacing_mm() != fixed.spacing_mm() {
        return Err(Error::data(format!(
            "moving spacing {:?} differs from fixed spacing {:?}",
            moving.spacing_mm(),
            fixed.spacing_mm()
        )));
    }
    Ok(())
}

/// One full registration pass. Flow comes back at full resolution in voxel
/// units; attention maps keep their native (attention-grid) resolution with
/// spacing scaled accordingly.
pub fn run_network<T: WorkingScalar>(
    params: &RegNetParams<T>,
    moving: &Volume,
    fixed: &Volume,
    mode: SampleMode,
    seed: u64,
    want_attention: bool,
) -> Result<RegOutputs> {
    check_pair_against_config(&params.config, moving, fixed)?;
    let mut tape = Tape::<T>::new();
    let net = params.push(&mut tape, false)?;
    let m = tape.constant(T::from_volume(moving))?;
    let f = tape.constant(T::from_volume(fixed))?;
    let mut rng = derive1(seed, Stream::VelocityNoise, 0);
    let reg = register_pair(&mut tape, &net, m, f, mode, AttentionPath::Full, &mut rng)?;
    let spacing = moving.spacing_mm();
    let warped = T::into_volume(tape.value(reg.warped), spacing)?;
    let flow = T::into_volume(tape.value(reg.flow.disp), spacing)?;
    let attention = if want_attention {
        let att = reg
            .attention
            .ok_or_else(|| Error::usage("attention outputs need the full attention path"))?;
        let gd = tape.value(att.gate_mov).grid_dims()?;
        let ext = moving.extents();
        let att_spacing = [
            spacing[0] * (ext[0] / gd.w) as f64,
            spacing[1] * (ext[1] / gd.h) as f64,
            spacing[2] * (ext[2] / gd.d) as f64,
        ];
        let vol = |tape: &Tape<T>, id| T::into_volume(tape.value(id), att_spacing);
        Some(AttentionDump {
            gate_mov: vol(&tape, att.gate_mov)?,
            gate_fix: vol(&tape, att.gate_fix)?,
            o_mov: vol(&tape, att.o_mov)?,
            o_fix: vol(&tape, att.o_fix)?,
            alpha_mov: tape.value(net.coatt.alpha_mov).data()[0].to_f64(),
            alpha_fix: tape.value(net.coatt.alpha_fix).data()[0].to_f64(),
        })
    } else {
        None
    };
    Ok(RegOutputs { warped, flow, attention })
}
