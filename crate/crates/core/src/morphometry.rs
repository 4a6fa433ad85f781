//! Cross-sectional morphometry from label volumes: cord cross-section area
//! (CSA), space available for the cord (SAC), and their ratio, per axial
//! slice and aggregated per vertebral level.
//!
//! Label legend: 0 background, 1 CSF, and 2..=8 cord at vertebral levels
//! C1..C7 (the cord label encodes the level). The spinal canal is defined as
//! cord union CSF, so canal ⊇ cord holds by construction. Areas are voxel
//! counts scaled by the in-plane spacing — no sub-voxel contour fitting.

use std::collections::BTreeMap;

use thiserror::Error;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CSF: u8 = 1;
/// Cord labels are `CORD_LEVEL_BASE + level - 1` for levels C1..C7.
pub const CORD_LEVEL_BASE: u8 = 2;
pub const NUM_LEVELS: u8 = 7;
pub const MAX_LABEL: u8 = CORD_LEVEL_BASE + NUM_LEVELS - 1;

#[derive(Debug, Error)]
pub enum MorphometryError {
    #[error("{0}")]
    Invalid(String),
}

pub fn is_cord(label: u8) -> bool {
    (CORD_LEVEL_BASE..=MAX_LABEL).contains(&label)
}

pub fn is_canal(label: u8) -> bool {
    label == LABEL_CSF || is_cord(label)
}

/// Vertebral level (1..=7 for C1..C7) encoded by a cord label.
pub fn level_of(label: u8) -> Option<u8> {
    is_cord(label).then(|| label - CORD_LEVEL_BASE + 1)
}

/// Dense label grid in Z-major `[Z, Y, X]` order with voxel spacing
/// `(dz, dy, dx)` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<u8>,
    ) -> Result<Self, MorphometryError> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(MorphometryError::Invalid(format!(
                "label payload holds {} voxels but dims {:?} require {}",
                data.len(),
                dims,
                expected
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(MorphometryError::Invalid(format!(
                "voxel spacing {spacing:?} must be positive"
            )));
        }
        if let Some(pos) = data.iter().position(|&l| l > MAX_LABEL) {
            return Err(MorphometryError::Invalid(format!(
                "voxel {} carries label {} outside the legend 0..={}",
                pos, data[pos], MAX_LABEL
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, z: usize) -> Result<&[u8], MorphometryError> {
        if z >= self.dims[0] {
            return Err(MorphometryError::Invalid(format!(
                "slice {z} out of range for {} slices",
                self.dims[0]
            )));
        }
        let n = self.dims[1] * self.dims[2];
        Ok(&self.data[z * n..(z + 1) * n])
    }

    /// In-plane voxel area `dy * dx` in mm2.
    pub fn pixel_area(&self) -> f64 {
        self.spacing[1] * self.spacing[2]
    }
}

/// Per-slice morphometry. `ratio` is `None` when the slice has no cord
/// (CSA = 0 leaves SAC/CSA undefined); a defined ratio of 0 means SAC = 0,
/// the maximal-stenosis indicator. `level` is the vertebral level carried by
/// the slice's cord voxels (modal label; `None` when the slice has no cord).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceMetrics {
    pub slice: usize,
    pub csa_mm2: f64,
    pub sac_mm2: f64,
    pub ratio: Option<f64>,
    pub level: Option<u8>,
}

/// Cord cross-section area of one axial slice: cord voxel count x dy*dx.
pub fn csa_per_slice(volume: &LabelVolume, z: usize) -> Result<f64, MorphometryError> {
    let count = volume.slice(z)?.iter().filter(|&&l| is_cord(l)).count();
    Ok(count as f64 * volume.pixel_area())
}

/// Space available for the cord: (canal − cord) voxel count x dy*dx, with
/// canal = cord ∪ CSF. Since the canal contains the cord by construction
/// this is simply the CSF area.
pub fn sac_per_slice(volume: &LabelVolume, z: usize) -> Result<f64, MorphometryError> {
    let slice = volume.slice(z)?;
    let canal = slice.iter().filter(|&&l| is_canal(l)).count();
    let cord = slice.iter().filter(|&&l| is_cord(l)).count();
    Ok((canal - cord) as f64 * volume.pixel_area())
}

/// SAC/CSA. Undefined (None) when CSA = 0; zero SAC with a present cord
/// yields Some(0.0).
pub fn sac_csa_ratio(csa_mm2: f64, sac_mm2: f64) -> Option<f64> {
    (csa_mm2 > 0.0).then(|| sac_mm2 / csa_mm2)
}

/// Modal cord label of a slice, mapped to its vertebral level. Ties break
/// toward the smaller (more rostral) level.
fn slice_level(slice: &[u8]) -> Option<u8> {
    let mut counts = [0usize; (NUM_LEVELS + 1) as usize];
    for &l in slice {
        if let Some(level) = level_of(l) {
            counts[level as usize] += 1;
        }
    }
    (1..=NUM_LEVELS)
        .filter(|&lvl| counts[lvl as usize] > 0)
        .max_by_key(|&lvl| counts[lvl as usize])
        .map(|lvl| {
            // max_by_key returns the last maximum; re-scan for the first
            let best = counts[lvl as usize];
            (1..=NUM_LEVELS)
                .find(|&l| counts[l as usize] == best)
                .unwrap()
        })
}

pub fn slice_metrics(volume: &LabelVolume, z: usize) -> Result<SliceMetrics, MorphometryError> {
    let csa = csa_per_slice(volume, z)?;
    let sac = sac_per_slice(volume, z)?;
    Ok(SliceMetrics {
        slice: z,
        csa_mm2: csa,
        sac_mm2: sac,
        ratio: sac_csa_ratio(csa, sac),
        level: slice_level(volume.slice(z)?),
    })
}

pub fn all_slice_metrics(volume: &LabelVolume) -> Result<Vec<SliceMetrics>, MorphometryError> {
    (0..volume.dims()[0]).map(|z| slice_metrics(volume, z)).collect()
}

/// Per-level means over the slices carrying that level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSummary {
    pub csa_mm2: f64,
    pub sac_mm2: f64,
    /// Mean of the defined per-slice ratios; None when no slice of the
    /// level had a defined ratio.
    pub ratio: Option<f64>,
    pub slices: usize,
}

/// Group slice metrics by vertebral level and average. Slices without a
/// cord (no level) are skipped; levels with no slices are absent from the
/// table — missing, never zero.
pub fn per_level_aggregate(metrics: &[SliceMetrics]) -> BTreeMap<u8, LevelSummary> {
    let mut acc: BTreeMap<u8, (f64, f64, f64, usize, usize)> = BTreeMap::new();
    for m in metrics {
        let Some(level) = m.level else { continue };
        let e = acc.entry(level).or_insert((0.0, 0.0, 0.0, 0, 0));
        e.0 += m.csa_mm2;
        e.1 += m.sac_mm2;
        if let Some(r) = m.ratio {
            e.2 += r;
            e.3 += 1;
        }
        e.4 += 1;
    }
    acc.into_iter()
        .map(|(level, (csa, sac, ratio, defined, n))| {
            (
                level,
                LevelSummary {
                    csa_mm2: csa / n as f64,
                    sac_mm2: sac / n as f64,
                    ratio: (defined > 0).then(|| ratio / defined as f64),
                    slices: n,
                },
            )
        })
        .collect()
}

/// Rasterize concentric ellipses into one slice: voxels inside the outer
/// ellipse get `LABEL_CSF`, voxels inside the inner one get `cord_label`.
/// Centre and semi-axes are in millimetres; voxel (y, x) samples at its
/// centre. Shared by tests and the synthetic subject generator.
pub fn rasterize_concentric_ellipses(
    slice: &mut [u8],
    dims_yx: [usize; 2],
    spacing_yx: [f64; 2],
    center_mm: [f64; 2],
    outer_mm: [f64; 2],
    inner_mm: [f64; 2],
    cord_label: u8,
) {
    let [ny, nx] = dims_yx;
    let [dy, dx] = spacing_yx;
    for y in 0..ny {
        for x in 0..nx {
            let py = (y as f64 + 0.5) * dy - center_mm[0];
            let px = (x as f64 + 0.5) * dx - center_mm[1];
            let inside = |ab: [f64; 2]| {
                ab[0] > 0.0
                    && ab[1] > 0.0
                    && (py / ab[0]).powi(2) + (px / ab[1]).powi(2) <= 1.0
            };
            let v = &mut slice[y * nx + x];
            if inside(inner_mm) {
                *v = cord_label;
            } else if inside(outer_mm) {
                *v = LABEL_CSF;
            }
        }
    }
}
