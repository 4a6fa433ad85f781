//! The on-disk volume format: a JSON sidecar header next to a raw
//! little-endian payload in Z-major order. Purpose-built and tiny on
//! purpose — scientific container formats are out of scope.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::morphometry::{LabelVolume, MAX_LABEL};

/// Voxel payload: `u8` for label maps, `f32` for scalar images.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            Self::U8(v) => v.len(),
            Self::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            Self::U8(_) => "u8",
            Self::F32(_) => "f32",
        }
    }
}

/// A volume in memory: dims `[Z, Y, X]`, spacing `(dz, dy, dx)` mm, a label
/// legend (empty for scalar volumes), and the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub legend: BTreeMap<u8, String>,
    pub orientation: String,
    pub data: VolumeData,
}

/// Legend for the standard label convention: 0 background, 1 CSF,
/// 2..=8 cord at C1..C7.
pub fn standard_legend() -> BTreeMap<u8, String> {
    let mut legend = BTreeMap::new();
    legend.insert(0, "background".to_string());
    legend.insert(1, "csf".to_string());
    for level in 1..=7u8 {
        legend.insert(1 + level, format!("cord_c{level}"));
    }
    legend
}

impl Volume {
    pub fn labels(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self, IoError> {
        let v = Self {
            dims,
            spacing,
            legend: standard_legend(),
            orientation: "ZYX".to_string(),
            data: VolumeData::U8(data),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn scalars(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self, IoError> {
        let v = Self {
            dims,
            spacing,
            legend: BTreeMap::new(),
            orientation: "ZYX".to_string(),
            data: VolumeData::F32(data),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn validate(&self) -> Result<(), IoError> {
        if self.data.len() != self.voxel_count() {
            return Err(IoError::Format(format!(
                "payload holds {} voxels but dims {:?} require {}",
                self.data.len(),
                self.dims,
                self.voxel_count()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(IoError::Format(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        if let VolumeData::U8(labels) = &self.data {
            for (i, &l) in labels.iter().enumerate() {
                if !self.legend.contains_key(&l) {
                    return Err(IoError::Format(format!(
                        "voxel {i} carries label {l} absent from the legend"
                    )));
                }
                if l > MAX_LABEL {
                    return Err(IoError::Format(format!(
                        "voxel {i} carries label {l} outside the supported range 0..={MAX_LABEL}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// View a label volume through the morphometry type.
    pub fn to_label_volume(&self) -> Result<LabelVolume, IoError> {
        match &self.data {
            VolumeData::U8(labels) => LabelVolume::new(self.dims, self.spacing, labels.clone())
                .map_err(|e| IoError::Format(e.to_string())),
            VolumeData::F32(_) => Err(IoError::Format(
                "expected a u8 label volume, found f32 scalars".to_string(),
            )),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], IoError> {
        match &self.data {
            VolumeData::F32(v) => Ok(v),
            VolumeData::U8(_) => Err(IoError::Format(
                "expected an f32 scalar volume, found u8 labels".to_string(),
            )),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], IoError> {
        match &self.data {
            VolumeData::U8(v) => Ok(v),
            VolumeData::F32(_) => Err(IoError::Format(
                "expected a u8 label volume, found f32 scalars".to_string(),
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    legend: BTreeMap<String, String>,
    orientation: String,
}

/// Sidecar path for a payload path: the extension is replaced by `.json`.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

/// Write `volume` as `path` (raw payload) plus its JSON sidecar.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), IoError> {
    volume.validate()?;
    let header = Header {
        dims: volume.dims,
        spacing: volume.spacing,
        dtype: volume.data.dtype().to_string(),
        legend: volume
            .legend
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
        orientation: volume.orientation.clone(),
    };
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    let bytes: Vec<u8> = match &volume.data {
        VolumeData::U8(v) => v.clone(),
        VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Load the payload at `path` guided by its JSON sidecar. Size mismatches
/// are reported with the offending byte counts.
pub fn load_volume(path: &Path) -> Result<Volume, IoError> {
    let header_path = sidecar_path(path);
    let header_text = fs::read_to_string(&header_path).map_err(|e| {
        IoError::Format(format!("missing sidecar {}: {e}", header_path.display()))
    })?;
    let header: Header = serde_json::from_str(&header_text).map_err(|e| {
        IoError::Format(format!("malformed sidecar {}: {e}", header_path.display()))
    })?;
    let bytes = fs::read(path)?;
    let voxels = header.dims[0] * header.dims[1] * header.dims[2];
    let elem = match header.dtype.as_str() {
        "u8" => 1,
        "f32" => 4,
        other => {
            return Err(IoError::Format(format!(
                "{}: unknown dtype {other:?} (expected u8 or f32)",
                header_path.display()
            )))
        }
    };
    if bytes.len() != voxels * elem {
        return Err(IoError::Format(format!(
            "{}: payload is {} bytes but dims {:?} x {} byte(s) require {}",
            path.display(),
            bytes.len(),
            header.dims,
            elem,
            voxels * elem
        )));
    }
    let data = match header.dtype.as_str() {
        "u8" => VolumeData::U8(bytes),
        _ => VolumeData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    let mut legend = BTreeMap::new();
    for (k, v) in header.legend {
        let label: u8 = k.parse().map_err(|_| {
            IoError::Format(format!(
                "{}: legend key {k:?} is not a u8 label",
                header_path.display()
            ))
        })?;
        legend.insert(label, v);
    }
    let volume = Volume {
        dims: header.dims,
        spacing: header.spacing,
        legend,
        orientation: header.orientation,
        data,
    };
    volume.validate()?;
    Ok(volume)
}
