//! RVOL1 volume files: a `<stem>.json` header plus a `<stem>.raw` payload of
//! little-endian 32-bit floats laid out channel-innermost,
//! `offset(c,x,y,z) = c + C*(x + W*(y + H*z))`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{LabelVolume, MAX_LABEL};
use crate::tensor::{GridDims, Value};
use crate::{Error, Result};

const MAGIC: &str = "RVOL1";
const DTYPE: &str = "f32le";
const ORDER: &str = "c,x,y,z";

/// Real-valued grid with physical voxel spacing; the in-memory twin of one
/// RVOL1 file pair. Payload values are exactly the stored 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    extents: [usize; 3],
    channels: usize,
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        extents: [usize; 3],
        channels: usize,
        spacing_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if extents.contains(&0) || channels == 0 {
            return Err(Error::shape(format!(
                "volume extents {extents:?} with {channels} channels are degenerate"
            )));
        }
        let n = channels * extents[0] * extents[1] * extents[2];
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume {extents:?} x{channels} needs {n} values, got {}",
                data.len()
            )));
        }
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::usage(format!(
                "voxel spacing must be finite and positive, got {spacing_mm:?}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::data("volume payload contains non-finite values"));
        }
        Ok(Volume { extents, channels, spacing_mm, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn grid_dims(&self) -> GridDims {
        GridDims::new(self.channels, self.extents[0], self.extents[1], self.extents[2])
    }

    /// Widen to the tape's working precision; exact, every f32 is an f64.
    pub fn to_value(&self) -> Value<f64> {
        let dims = self.grid_dims().dims();
        Value::new(dims, self.data.iter().map(|&v| v as f64).collect()).unwrap()
    }

    /// Round a working-precision grid into a storable volume.
    pub fn from_value(v: &Value<f64>, spacing_mm: [f64; 3]) -> Result<Self> {
        let gd = v.grid_dims()?;
        let data: Vec<f32> = v.data().iter().map(|&x| x as f32).collect();
        Volume::new([gd.w, gd.h, gd.d], gd.c, spacing_mm, data)
    }

    /// Bit-exact view at the storage precision.
    pub fn to_value_f32(&self) -> Value<f32> {
        Value::new(self.grid_dims().dims(), self.data.clone()).unwrap()
    }

    /// Bit-exact adoption of a storage-precision grid.
    pub fn from_value_f32(v: &Value<f32>, spacing_mm: [f64; 3]) -> Result<Self> {
        let gd = v.grid_dims()?;
        Volume::new([gd.w, gd.h, gd.d], gd.c, spacing_mm, v.data().to_vec())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    shape: [usize; 3],
    channels: usize,
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

/// Write `<stem>.json` and `<stem>.raw`; byte-deterministic per input.
pub fn write_volume(v: &Volume, stem: &Path) -> Result<()> {
    let header = Header {
        magic: MAGIC.to_string(),
        shape: v.extents,
        channels: v.channels,
        spacing_mm: v.spacing_mm,
        dtype: DTYPE.to_string(),
        order: ORDER.to_string(),
    };
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::data(format!("header serialization failed: {e}")))?;
    fs::write(stem.with_extension("json"), json)?;
    let mut raw = Vec::with_capacity(4 * v.data.len());
    for value in &v.data {
        raw.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(stem.with_extension("raw"), raw)?;
    Ok(())
}

/// An I/O error that names the file, keeping the error kind intact.
pub(crate) fn read_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Read and validate an RVOL1 pair written by [`write_volume`].
pub fn read_volume(stem: &Path) -> Result<Volume> {
    let header_path = stem.with_extension("json");
    let json = fs::read_to_string(&header_path).map_err(|e| read_err(&header_path, e))?;
    let header: Header = serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("malformed header {:?}: {e}", stem.with_extension("json"))))?;
    if header.magic != MAGIC {
        return Err(Error::data(format!(
            "magic {:?} is not {MAGIC:?} in {:?}",
            header.magic,
            stem.with_extension("json")
        )));
    }
    if header.dtype != DTYPE {
        return Err(Error::data(format!("dtype {:?} is not {DTYPE:?}", header.dtype)));
    }
    if header.order != ORDER {
        return Err(Error::data(format!("order {:?} is not {ORDER:?}", header.order)));
    }
    if header.shape.contains(&0) || header.channels == 0 {
        return Err(Error::data(format!(
            "shape {:?} x{} is degenerate",
            header.shape, header.channels
        )));
    }
    if header.spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::data(format!(
            "spacing_mm {:?} must be finite and positive",
            header.spacing_mm
        )));
    }
    let raw_path = stem.with_extension("raw");
    let raw = fs::read(&raw_path).map_err(|e| read_err(&raw_path, e))?;
    let n = header.channels * header.shape[0] * header.shape[1] * header.shape[2];
    if raw.len() != 4 * n {
        return Err(Error::data(format!(
            "raw payload is {} bytes, header implies {} bytes",
            raw.len(),
            4 * n
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::data("raw payload contains non-finite values"));
    }
    Ok(Volume { extents: header.shape, channels: header.channels, spacing_mm: header.spacing_mm, data })
}

/// Store labels as a single-channel RVOL1 volume of exact small integers.
pub fn write_labels(labels: &LabelVolume, stem: &Path) -> Result<()> {
    let data: Vec<f32> = labels.labels().iter().map(|&l| l as f32).collect();
    let v = Volume::new(labels.extents(), 1, labels.spacing_mm(), data)?;
    write_volume(&v, stem)
}

/// Read a label volume, rejecting fractional or out-of-range values.
pub fn read_labels(stem: &Path) -> Result<LabelVolume> {
    let v = read_volume(stem)?;
    if v.channels != 1 {
        return Err(Error::data(format!(
            "label volume must have 1 channel, got {}",
            v.channels
        )));
    }
    let mut labels = Vec::with_capacity(v.data.len());
    for &value in &v.data {
        if value.fract() != 0.0 || !(0.0..=MAX_LABEL as f32).contains(&value) {
            return Err(Error::data(format!(
                "value {value} is not a label in 0..={MAX_LABEL}"
            )));
        }
        labels.push(value as u8);
    }
    LabelVolume::new(v.extents, v.spacing_mm, labels)
}
