//! Diffusion tensor fitting and eigenmetrics: per-voxel weighted least
//! squares on log-signals, analytic 3x3 eigendecomposition, and the FA, MD,
//! and RD scalar maps aggregated per vertebral level.

mod eig3;

pub use eig3::{eig3_symmetric, eigenvalues_symmetric, EigenSystem};

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtiError {
    #[error("sample {index}: {msg}")]
    InvalidSample { index: usize, msg: String },
    #[error("design matrix rank deficient: {msg}")]
    RankDeficient { msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// One diffusion-weighted measurement: weighting `b` (s/mm2), unit gradient
/// direction, and the measured signal.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionSample {
    pub b: f64,
    pub dir: [f64; 3],
    pub signal: f64,
}

/// Symmetric diffusion tensor (mm2/s) plus the fitted log baseline signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTensor {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
    pub ln_s0: f64,
}

impl DiffusionTensor {
    pub fn from_theta(theta: &[f64; 7]) -> Self {
        Self {
            dxx: theta[0],
            dyy: theta[1],
            dzz: theta[2],
            dxy: theta[3],
            dxz: theta[4],
            dyz: theta[5],
            ln_s0: theta[6],
        }
    }

    pub fn theta(&self) -> [f64; 7] {
        [
            self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz, self.ln_s0,
        ]
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.dxx, self.dxy, self.dxz],
            [self.dxy, self.dyy, self.dyz],
            [self.dxz, self.dyz, self.dzz],
        ]
    }

    pub fn s0(&self) -> f64 {
        self.ln_s0.exp()
    }

    /// Axis-aligned tensor from eigenvalues `(l1, l2, l3)`.
    pub fn diagonal(l: [f64; 3], s0: f64) -> Self {
        Self {
            dxx: l[0],
            dyy: l[1],
            dzz: l[2],
            dxy: 0.0,
            dxz: 0.0,
            dyz: 0.0,
            ln_s0: s0.ln(),
        }
    }
}

/// Scalar rotational invariants of one voxel's tensor fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelMetrics {
    pub fa: f64,
    pub md: f64,
    pub rd: f64,
}

const COMPONENT_NAMES: [&str; 7] = ["Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz", "ln S0"];

/// Row of the log-linear design matrix, so that `row . theta = ln S`.
pub fn design_row(sample: &DiffusionSample) -> [f64; 7] {
    let b = sample.b;
    let [gx, gy, gz] = sample.dir;
    [
        -b * gx * gx,
        -b * gy * gy,
        -b * gz * gz,
        -2.0 * b * gx * gy,
        -2.0 * b * gx * gz,
        -2.0 * b * gy * gz,
        1.0,
    ]
}

fn validate_samples(samples: &[DiffusionSample]) -> Result<(), DtiError> {
    if samples.len() < 7 {
        return Err(DtiError::Invalid(format!(
            "need at least 7 samples to fit 7 unknowns, got {}",
            samples.len()
        )));
    }
    for (index, s) in samples.iter().enumerate() {
        if !(s.signal > 0.0) {
            return Err(DtiError::InvalidSample {
                index,
                msg: format!("signal {} must be positive for the log transform", s.signal),
            });
        }
        if s.b < 0.0 {
            return Err(DtiError::InvalidSample {
                index,
                msg: format!("negative b-value {}", s.b),
            });
        }
        if s.b > 0.0 {
            let n = (s.dir[0] * s.dir[0] + s.dir[1] * s.dir[1] + s.dir[2] * s.dir[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(DtiError::InvalidSample {
                    index,
                    msg: format!("gradient direction {:?} has norm {n}, expected 1", s.dir),
                });
            }
        }
    }
    Ok(())
}

/// Distinct (sign-folded) gradient directions among the b>0 samples; used
/// only for rank-deficiency diagnostics.
fn distinct_directions(samples: &[DiffusionSample]) -> Vec<[f64; 3]> {
    let mut seen: Vec<[f64; 3]> = Vec::new();
    for s in samples.iter().filter(|s| s.b > 0.0) {
        // fold antipodes: g and -g carry identical information
        let mut g = s.dir;
        if g[0] < 0.0 || (g[0] == 0.0 && (g[1] < 0.0 || (g[1] == 0.0 && g[2] < 0.0))) {
            g = [-g[0], -g[1], -g[2]];
        }
        let close = |a: &[f64; 3]| {
            (a[0] - g[0]).abs() < 1e-9 && (a[1] - g[1]).abs() < 1e-9 && (a[2] - g[2]).abs() < 1e-9
        };
        if !seen.iter().any(close) {
            seen.push(g);
        }
    }
    seen
}

/// Solve the weighted normal equations `(X^T W X) theta = X^T W y` by
/// Gaussian elimination with partial pivoting.
fn weighted_normal_solve(
    rows: &[[f64; 7]],
    y: &[f64],
    weights: &[f64],
) -> Result<[f64; 7], usize> {
    let mut a = [[0.0f64; 7]; 7];
    let mut b = [0.0f64; 7];
    for ((row, &yi), &wi) in rows.iter().zip(y).zip(weights) {
        for i in 0..7 {
            b[i] += wi * row[i] * yi;
            for j in i..7 {
                a[i][j] += wi * row[i] * row[j];
            }
        }
    }
    for i in 0..7 {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);

    // elimination with row pivoting; a failed pivot names its column
    let mut perm: [usize; 7] = [0, 1, 2, 3, 4, 5, 6];
    for col in 0..7 {
        let pivot_row = (col..7)
            .max_by(|&r1, &r2| {
                a[perm[r1]][col]
                    .abs()
                    .partial_cmp(&a[perm[r2]][col].abs())
                    .unwrap()
            })
            .unwrap();
        perm.swap(col, pivot_row);
        let p = a[perm[col]][col];
        if p.abs() < 1e-12 * scale {
            return Err(col);
        }
        for r in (col + 1)..7 {
            let f = a[perm[r]][col] / p;
            for c in col..7 {
                a[perm[r]][c] -= f * a[perm[col]][c];
            }
            b[perm[r]] -= f * b[perm[col]];
        }
    }
    let mut theta = [0.0f64; 7];
    for col in (0..7).rev() {
        let mut acc = b[perm[col]];
        for c in (col + 1)..7 {
            acc -= a[perm[col]][c] * theta[c];
        }
        theta[col] = acc / a[perm[col]][col];
    }
    Ok(theta)
}

fn rank_error(samples: &[DiffusionSample], col: usize) -> DtiError {
    let dirs = distinct_directions(samples);
    let shown: Vec<String> = dirs
        .iter()
        .take(6)
        .map(|d| format!("[{:.3}, {:.3}, {:.3}]", d[0], d[1], d[2]))
        .collect();
    DtiError::RankDeficient {
        msg: format!(
            "component {} is unresolved by the {} distinct gradient direction(s) {}{}",
            COMPONENT_NAMES[col],
            dirs.len(),
            shown.join(", "),
            if dirs.len() > 6 { ", ..." } else { "" }
        ),
    }
}

/// Two-pass weighted least squares: an ordinary fit on `ln S` fixes the
/// weights `w_i = exp(2 . row_i . theta_OLS)` (squared predicted signals),
/// then one weighted pass produces the returned tensor.
pub fn wls_fit(samples: &[DiffusionSample]) -> Result<DiffusionTensor, DtiError> {
    validate_samples(samples)?;
    let rows: Vec<[f64; 7]> = samples.iter().map(design_row).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.signal.ln()).collect();

    let ones = vec![1.0; rows.len()];
    let theta_ols =
        weighted_normal_solve(&rows, &y, &ones).map_err(|col| rank_error(samples, col))?;

    let weights: Vec<f64> = rows
        .iter()
        .map(|row| {
            let pred: f64 = row.iter().zip(&theta_ols).map(|(r, t)| r * t).sum();
            (2.0 * pred).exp()
        })
        .collect();
    let theta = weighted_normal_solve(&rows, &y, &weights)
        .map_err(|col| rank_error(samples, col))?;
    Ok(DiffusionTensor::from_theta(&theta))
}

/// Fractional anisotropy `sqrt(3/2) . ||lambda - mean|| / ||lambda||`,
/// clamped into [0, 1]; zero-tensor inputs return 0.
pub fn fa(l1: f64, l2: f64, l3: f64) -> f64 {
    let sq = l1 * l1 + l2 * l2 + l3 * l3;
    if sq < 1e-20 {
        return 0.0;
    }
    let m = (l1 + l2 + l3) / 3.0;
    let dev = (l1 - m).powi(2) + (l2 - m).powi(2) + (l3 - m).powi(2);
    (1.5 * dev / sq).sqrt().clamp(0.0, 1.0)
}

/// Mean diffusivity `(l1 + l2 + l3) / 3`.
pub fn md(l1: f64, l2: f64, l3: f64) -> f64 {
    (l1 + l2 + l3) / 3.0
}

/// Radial diffusivity `(l2 + l3) / 2` (mean of the two smaller eigenvalues).
pub fn rd(l2: f64, l3: f64) -> f64 {
    (l2 + l3) / 2.0
}

/// Metrics from an eigensystem. Negative eigenvalues (non-physical fits,
/// possible under noise) are clamped to zero here and only here, so the
/// eigensystem itself stays diagnostic.
pub fn voxel_metrics(eigen: &EigenSystem) -> VoxelMetrics {
    let l: Vec<f64> = eigen.values.iter().map(|v| v.max(0.0)).collect();
    VoxelMetrics {
        fa: fa(l[0], l[1], l[2]),
        md: md(l[0], l[1], l[2]),
        rd: rd(l[1], l[2]),
    }
}

/// Convenience pipeline: fit, decompose, and summarize one voxel.
pub fn fit_voxel(samples: &[DiffusionSample]) -> Result<(DiffusionTensor, VoxelMetrics), DtiError> {
    let tensor = wls_fit(samples)?;
    let eigen = eig3_symmetric(&tensor.matrix());
    Ok((tensor, voxel_metrics(&eigen)))
}

/// Noiseless forward model `S = S0 . exp(-b g^T D g)`.
pub fn simulate_signal(tensor: &DiffusionTensor, b: f64, dir: [f64; 3]) -> f64 {
    let d = tensor.matrix();
    let mut q = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            q += dir[i] * d[i][j] * dir[j];
        }
    }
    (tensor.ln_s0 - b * q).exp()
}

/// Eigenvalues `(l1, l2, l2)` of the axially symmetric (prolate) tensor with
/// the given FA and MD.
pub fn prolate_from_fa_md(fa: f64, md: f64) -> [f64; 3] {
    assert!((0.0..1.0).contains(&fa), "prolate construction needs FA in [0,1)");
    // for l2 == l3: FA = d / sqrt(3 MD^2 + 2 d^2 / 3) with d = l1 - l2
    let d = fa * md * (3.0 / (1.0 - 2.0 * fa * fa / 3.0)).sqrt();
    [md + 2.0 * d / 3.0, md - d / 3.0, md - d / 3.0]
}

/// The 12 vertices of a unit icosahedron: the default simulation and
/// acquisition direction scheme.
pub fn icosahedral_directions() -> Vec<[f64; 3]> {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let n = (1.0 + phi * phi).sqrt();
    let (a, c) = (1.0 / n, phi / n);
    let mut dirs = Vec::with_capacity(12);
    for &s1 in &[1.0, -1.0] {
        for &s2 in &[1.0, -1.0] {
            dirs.push([0.0, s1 * a, s2 * c]);
            dirs.push([s1 * a, s2 * c, 0.0]);
            dirs.push([s1 * c, 0.0, s2 * a]);
        }
    }
    dirs
}

/// Gradient table parsing: one `b gx gy gz` line per sample; `#` comments
/// and blank lines ignored. Directions with `b > 0` must be unit length.
pub fn parse_gradient_table(text: &str) -> Result<Vec<(f64, [f64; 3])>, DtiError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DtiError::Invalid(format!(
                "gradient table line {}: expected 'b gx gy gz', got {line:?}",
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64, DtiError> {
            s.parse().map_err(|_| {
                DtiError::Invalid(format!(
                    "gradient table line {}: {s:?} is not a number",
                    lineno + 1
                ))
            })
        };
        let b = parse(fields[0])?;
        let dir = [parse(fields[1])?, parse(fields[2])?, parse(fields[3])?];
        if b < 0.0 {
            return Err(DtiError::Invalid(format!(
                "gradient table line {}: negative b-value {b}",
                lineno + 1
            )));
        }
        if b > 0.0 {
            let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(DtiError::Invalid(format!(
                    "gradient table line {}: direction norm {n} != 1",
                    lineno + 1
                )));
            }
        }
        out.push((b, dir));
    }
    Ok(out)
}

/// Per-level mean metrics over cord voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelMetrics {
    pub fa: f64,
    pub md: f64,
    pub rd: f64,
    pub voxels: usize,
}

/// Mean FA/MD/RD per vertebral level over voxels inside the cord mask.
/// Levels without any cord voxel are absent from the map (missing, never 0).
pub fn per_level_metrics(
    metrics: &[VoxelMetrics],
    levels: &[u8],
    cord: &[bool],
) -> Result<BTreeMap<u8, LevelMetrics>, DtiError> {
    if metrics.len() != levels.len() || metrics.len() != cord.len() {
        return Err(DtiError::Invalid(format!(
            "length mismatch: {} metrics, {} levels, {} mask entries",
            metrics.len(),
            levels.len(),
            cord.len()
        )));
    }
    let mut acc: BTreeMap<u8, LevelMetrics> = BTreeMap::new();
    for ((m, &lvl), &inside) in metrics.iter().zip(levels).zip(cord) {
        if !inside {
            continue;
        }
        let e = acc.entry(lvl).or_insert(LevelMetrics {
            fa: 0.0,
            md: 0.0,
            rd: 0.0,
            voxels: 0,
        });
        e.fa += m.fa;
        e.md += m.md;
        e.rd += m.rd;
        e.voxels += 1;
    }
    for e in acc.values_mut() {
        let n = e.voxels as f64;
        e.fa /= n;
        e.md /= n;
        e.rd /= n;
    }
    Ok(acc)
}
