//! Synthetic phantom generation: axial image/label stacks with elliptical
//! canal and cord whose geometry narrows with a stenosis parameter, DWI
//! signal stacks with a planted FA ↔ SAC/CSA correlation, and a small
//! blob-segmentation toy task for quick training checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::tables::{
    save_gradient_table, save_manifest, DatasetManifest, SubjectEntry, GENDERS, MACHINES,
};
use super::volume::{save_volume, Volume};
use super::IoError;
use crate::dti::{icosahedral_directions, prolate_from_fa_md, simulate_signal, DiffusionTensor};
use crate::morphometry::rasterize_concentric_ellipses;
use crate::rng::SeedRng;

/// Generator knobs. Geometry is expressed in millimetres; all semi-axes
/// scale with gender and a per-level anatomy profile, which leaves the
/// SAC/CSA ratio a function of the stenosis parameter alone.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Volume dims [Z, Y, X].
    pub dims: [usize; 3],
    /// Spacing (dz, dy, dx) mm.
    pub spacing: [f64; 3],
    /// Cord semi-axes (y, x) at theta = 0.
    pub cord_semi_axes: [f64; 2],
    /// Canal minus cord semi-axis gap at theta = 0 (same on both axes).
    pub canal_gap: f64,
    /// Fractional cord shrink at theta = 1.
    pub cord_shrink: f64,
    /// Gender size factor: F scales by 1 - g, M by 1 + g.
    pub gender_scale: f64,
    /// Per-level anatomy scale C1..C7 (uniform, so ratio is unaffected).
    pub level_scales: [f64; 7],
    /// Gaussian image noise sd.
    pub image_noise: f64,
    /// Whether to synthesize the DWI stack.
    pub with_dwi: bool,
    pub b_value: f64,
    pub s0_cord: f64,
    pub s0_csf: f64,
    pub s0_background: f64,
    /// Rician noise sigma as a fraction of `s0_cord`.
    pub dwi_noise_frac: f64,
    pub md_cord: f64,
    pub md_csf: f64,
    pub md_background: f64,
    /// Planted per-level FA model: base + amplitude * (rho u + sqrt(1-rho^2) e).
    pub fa_base: f64,
    pub fa_amplitude: f64,
    /// Target correlation between planted FA and the SAC/CSA ratio.
    pub target_correlation: f64,
    /// Gender FA offset (M positive, F negative).
    pub gender_fa_offset: f64,
    /// Per-machine FA offsets for A, B, C.
    pub machine_fa_offsets: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [21, 64, 64],
            spacing: [5.0, 0.5, 0.5],
            cord_semi_axes: [5.5, 4.0],
            canal_gap: 3.5,
            cord_shrink: 0.25,
            gender_scale: 0.05,
            level_scales: [1.06, 1.03, 1.0, 0.98, 0.97, 0.99, 1.02],
            image_noise: 0.05,
            with_dwi: true,
            b_value: 1000.0,
            s0_cord: 1000.0,
            s0_csf: 1100.0,
            s0_background: 100.0,
            dwi_noise_frac: 0.02,
            md_cord: 0.9e-3,
            md_csf: 2.8e-3,
            md_background: 1.0e-3,
            fa_base: 0.55,
            fa_amplitude: 0.12,
            target_correlation: 0.6,
            gender_fa_offset: 0.01,
            machine_fa_offsets: [0.0, 0.04, -0.04],
        }
    }
}

/// Everything generated for one subject, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub image: Volume,
    pub labels: Volume,
    /// One scalar volume per gradient table row (empty when DWI disabled).
    pub dwi: Vec<Volume>,
    pub gradients: Vec<(f64, [f64; 3])>,
    /// Planted ground-truth FA per vertebral level.
    pub fa_by_level: BTreeMap<u8, f64>,
    pub theta: f64,
}

/// Vertebral level (1..=7) of slice `z` in a stack of `nz` slices: seven
/// equal bands, C1 on top.
pub fn level_of_slice(z: usize, nz: usize) -> u8 {
    (z * 7 / nz) as u8 + 1
}

fn machine_index(machine: char) -> Result<usize, IoError> {
    MACHINES
        .iter()
        .position(|&m| m == machine)
        .ok_or_else(|| IoError::Invalid(format!("machine {machine:?} not in {MACHINES:?}")))
}

/// Generate one subject. `theta` in [0, 1] is the stenosis severity: the
/// canal-cord gap closes linearly in theta (SAC hits 0 at 1) while the cord
/// itself shrinks by `cord_shrink * theta`.
pub fn synthesize_subject(
    cfg: &SynthConfig,
    seed: u64,
    gender: char,
    machine: char,
    theta: f64,
) -> Result<SyntheticSubject, IoError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(IoError::Invalid(format!(
            "stenosis theta {theta} outside [0, 1]"
        )));
    }
    if !GENDERS.contains(&gender) {
        return Err(IoError::Invalid(format!(
            "gender {gender:?} not in {GENDERS:?}"
        )));
    }
    let machine_idx = machine_index(machine)?;
    let [nz, ny, nx] = cfg.dims;
    let [_, dy, dx] = cfg.spacing;
    let g = 1.0 + cfg.gender_scale * if gender == 'M' { 1.0 } else { -1.0 };
    let center = [ny as f64 * dy / 2.0, nx as f64 * dx / 2.0];

    // planted per-level FA: a standardized stenosis latent u (positively
    // aligned with the ratio) mixed with fresh per-level noise at the
    // target correlation
    let mut fa_rng = SeedRng::stream(seed, "synth.fa");
    let rho = cfg.target_correlation;
    let u = (0.5 - theta) * 12.0f64.sqrt();
    let offset = cfg.machine_fa_offsets[machine_idx]
        + cfg.gender_fa_offset * if gender == 'M' { 1.0 } else { -1.0 };
    let mut fa_by_level = BTreeMap::new();
    for level in 1..=7u8 {
        let eps = fa_rng.normal();
        let fa = cfg.fa_base + cfg.fa_amplitude * (rho * u + (1.0 - rho * rho).sqrt() * eps)
            + offset;
        fa_by_level.insert(level, fa.clamp(0.10, 0.90));
    }

    // rasterize labels slice by slice
    let mut labels = vec![0u8; nz * ny * nx];
    for z in 0..nz {
        let level = level_of_slice(z, nz);
        let s = g * cfg.level_scales[(level - 1) as usize];
        let cord = [
            s * cfg.cord_semi_axes[0] * (1.0 - cfg.cord_shrink * theta),
            s * cfg.cord_semi_axes[1] * (1.0 - cfg.cord_shrink * theta),
        ];
        let gap = s * cfg.canal_gap * (1.0 - theta);
        let canal = [cord[0] + gap, cord[1] + gap];
        if canal[0] >= center[0] || canal[1] >= center[1] {
            return Err(IoError::Invalid(format!(
                "canal semi-axes {canal:?} mm do not fit the {ny}x{nx} grid"
            )));
        }
        rasterize_concentric_ellipses(
            &mut labels[z * ny * nx..(z + 1) * ny * nx],
            [ny, nx],
            [dy, dx],
            center,
            canal,
            cord,
            1 + level,
        );
    }

    // grayscale image: per-tissue intensity plus Gaussian noise
    let mut img_rng = SeedRng::stream(seed, "synth.image");
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let base = match l {
                0 => 0.10,
                1 => 0.85,
                _ => 0.45,
            };
            (base + cfg.image_noise * img_rng.normal()) as f32
        })
        .collect();

    // DWI stack: one volume per gradient row, Rician-like noise
    let mut gradients = vec![(0.0, [0.0, 0.0, 0.0])];
    for dir in icosahedral_directions() {
        gradients.push((cfg.b_value, dir));
    }
    let mut dwi = Vec::new();
    if cfg.with_dwi {
        let mut dwi_rng = SeedRng::stream(seed, "synth.dwi");
        let sigma = cfg.s0_cord * cfg.dwi_noise_frac;
        let mut stacks = vec![vec![0f32; nz * ny * nx]; gradients.len()];
        for (vi, &l) in labels.iter().enumerate() {
            let z = vi / (ny * nx);
            let tensor = match l {
                0 => DiffusionTensor::diagonal(
                    [cfg.md_background; 3],
                    cfg.s0_background,
                ),
                1 => DiffusionTensor::diagonal([cfg.md_csf; 3], cfg.s0_csf),
                _ => {
                    let fa = fa_by_level[&level_of_slice(z, nz)];
                    let l3 = prolate_from_fa_md(fa, cfg.md_cord);
                    // principal axis along z (the cord axis)
                    DiffusionTensor::diagonal([l3[1], l3[2], l3[0]], cfg.s0_cord)
                }
            };
            for (k, &(b, dir)) in gradients.iter().enumerate() {
                let clean = simulate_signal(&tensor, b, dir);
                let a = clean + sigma * dwi_rng.normal();
                let b2 = sigma * dwi_rng.normal();
                stacks[k][vi] = ((a * a + b2 * b2).sqrt().max(1e-3)) as f32;
            }
        }
        for stack in stacks {
            dwi.push(Volume::scalars(cfg.dims, cfg.spacing, stack)?);
        }
    }

    Ok(SyntheticSubject {
        image: Volume::scalars(cfg.dims, cfg.spacing, image)?,
        labels: Volume::labels(cfg.dims, cfg.spacing, labels)?,
        dwi,
        gradients,
        fa_by_level,
        theta,
    })
}

/// Cohort composition for `synthesize_cohort`.
#[derive(Debug, Clone, Copy)]
pub struct CohortPlan {
    pub females: usize,
    pub males: usize,
    /// Number of machines in use (1..=3), assigned round-robin.
    pub machines: usize,
}

impl Default for CohortPlan {
    fn default() -> Self {
        Self {
            females: 125,
            males: 142,
            machines: 3,
        }
    }
}

fn subject_seed(master: u64, index: usize) -> u64 {
    // splitmix-style spread so per-subject streams are decorrelated
    let mut x = master ^ (0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

/// Generate a whole cohort on disk: volumes, DWI stacks, gradient tables,
/// and a manifest tying them together. Returns the manifest path.
pub fn synthesize_cohort(
    cfg: &SynthConfig,
    plan: &CohortPlan,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, IoError> {
    if plan.machines == 0 || plan.machines > MACHINES.len() {
        return Err(IoError::Invalid(format!(
            "machine count {} outside 1..={}",
            plan.machines,
            MACHINES.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut theta_rng = SeedRng::stream(seed, "cohort.theta");
    let mut subjects = Vec::new();
    let total = plan.females + plan.males;
    for i in 0..total {
        let id = format!("sub-{:03}", i + 1);
        let gender = if i < plan.females { 'F' } else { 'M' };
        let machine = MACHINES[i % plan.machines];
        let theta = theta_rng.uniform();
        let subject = synthesize_subject(cfg, subject_seed(seed, i), gender, machine, theta)?;

        let image_rel = format!("{id}_image.raw");
        let labels_rel = format!("{id}_labels.raw");
        save_volume(&subject.image, &out_dir.join(&image_rel))?;
        save_volume(&subject.labels, &out_dir.join(&labels_rel))?;
        let mut entry = SubjectEntry {
            id: id.clone(),
            gender,
            machine,
            image: image_rel,
            labels: labels_rel,
            dwi: None,
            gradients: None,
        };
        if cfg.with_dwi {
            let mut dwi_rels = Vec::new();
            for (k, vol) in subject.dwi.iter().enumerate() {
                let rel = format!("{id}_dwi{k:02}.raw");
                save_volume(vol, &out_dir.join(&rel))?;
                dwi_rels.push(rel);
            }
            let grad_rel = format!("{id}_grad.txt");
            save_gradient_table(&subject.gradients, &out_dir.join(&grad_rel))?;
            entry.dwi = Some(dwi_rels);
            entry.gradients = Some(grad_rel);
        }
        subjects.push(entry);
    }
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&DatasetManifest { subjects }, &manifest_path)?;
    Ok(manifest_path)
}

/// Tiny 5-class blob-segmentation task: four elliptical foreground classes
/// at well-separated intensities on a noisy background. Returns
/// (image, labels) pairs of `size*size` pixels with labels in 0..=4.
pub fn toy_slices(count: usize, size: usize, seed: u64) -> Vec<(Vec<f32>, Vec<u8>)> {
    let mut rng = SeedRng::stream(seed, "toy");
    let intensities = [0.05f64, 0.25, 0.45, 0.65, 0.85];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut labels = vec![0u8; size * size];
        // one blob per quadrant, one foreground class each
        for class in 1..=4u8 {
            let (qy, qx) = (((class - 1) / 2) as f64, ((class - 1) % 2) as f64);
            let cy = (qy + 0.5) * size as f64 / 2.0 + rng.normal() * size as f64 * 0.04;
            let cx = (qx + 0.5) * size as f64 / 2.0 + rng.normal() * size as f64 * 0.04;
            let ay = size as f64 * (0.12 + 0.06 * rng.uniform());
            let ax = size as f64 * (0.12 + 0.06 * rng.uniform());
            for y in 0..size {
                for x in 0..size {
                    let fy = (y as f64 + 0.5 - cy) / ay;
                    let fx = (x as f64 + 0.5 - cx) / ax;
                    if fy * fy + fx * fx <= 1.0 {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
        let image: Vec<f32> = labels
            .iter()
            .map(|&l| (intensities[l as usize] + 0.05 * rng.normal()) as f32)
            .collect();
        out.push((image, labels));
    }
    out
}
