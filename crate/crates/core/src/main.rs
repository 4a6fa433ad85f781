//! `cordseg` command-line interface.
//!
//! Subcommands cover the whole pipeline: cohort synthesis, training,
//! segmentation, morphometry, diffusion fitting, stratified statistics,
//! and the two self-check harnesses (gradient oracles and the attention
//! scaling benchmark).
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, malformed
//! inputs, impossible requests), 2 on internal errors (non-finite loss,
//! invariant violations).
//!
//! Every kernel in this binary is single-threaded and seeded, so runs are
//! bit-reproducible by construction; `CORDSEG_THREADS` is validated and
//! `CORDSEG_THREADS=1` implies `--strict`, but neither changes the
//! execution schedule.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};

use cordseg::bench::{bench_to_csv, run_bench, scaling_ratio, AttentionKind};
use cordseg::dti::{fit_voxel, parse_gradient_table, per_level_metrics, DiffusionSample};
use cordseg::io::{
    load_manifest, load_training_set, load_volume, save_comparisons, save_manifest, save_volume,
    segment_volume, synthesize_cohort, CohortPlan, DatasetManifest, MetricsRow, MetricsTable,
    SubjectEntry, SynthConfig, Volume, INPUT_CHANNELS,
};
use cordseg::model::{
    load_checkpoint, save_checkpoint, train_epoch, AdamW, ModelConfig, SattisUnet, SkipMode,
    TrainConfig,
};
use cordseg::morphometry::{all_slice_metrics, level_of, per_level_aggregate};
use cordseg::oracle::gradcheck_suite;
use cordseg::rng::SeedRng;
use cordseg::stats::{stratified_analysis, GroupBy};
use cordseg::tensor::{ParamStore, Tensor};
use cordseg::Error;

/// Slices segmented per forward pass; bounds peak graph memory without
/// changing results (inference has no cross-slice state).
const SEGMENT_BATCH: usize = 8;

#[derive(Parser)]
#[command(name = "cordseg", version, about = "Spinal cord segmentation and quantification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (images, labels, DWI stacks, manifest).
    Synth {
        /// Total cohort size; overrides --females/--males with a prorated
        /// split at the same ratio.
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long, default_value_t = 125)]
        females: usize,
        #[arg(long, default_value_t = 142)]
        males: usize,
        /// Scanners in use (1..=3), assigned round-robin.
        #[arg(long, default_value_t = 3)]
        machines: usize,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Skip diffusion stacks; `dti` will not run on such a cohort.
        #[arg(long)]
        no_dwi: bool,
    },
    /// Train the segmentation network on a manifest of labeled volumes.
    Train {
        /// Dataset manifest (as written by `synth` or `segment --out-dir`).
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config `{"model": {..}, "train": {..}}`; both sections are
        /// optional and partial (missing fields take defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Skip-connection variant: attentive, concat, or none.
        #[arg(long)]
        skip_mode: Option<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Bit-reproducible execution. Always on in practice: every kernel
        /// is single-threaded and seeded; the flag is accepted so scripted
        /// pipelines can state the requirement explicitly.
        #[arg(long)]
        strict: bool,
    },
    /// Segment one volume (--in/--out) or a whole manifest
    /// (--manifest/--out-dir, which writes a new manifest pointing at the
    /// predictions).
    Segment {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image volume (.raw with JSON sidecar).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output label volume.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Batch mode: dataset manifest to segment end to end.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Batch mode: directory for predicted labels + new manifest.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-level cross-sectional areas from a segmented cohort.
    Quantify {
        /// Directory containing manifest.json with label volumes.
        #[arg(long)]
        labels: PathBuf,
        /// Metrics CSV to write (one row per subject and level).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diffusion tensors in the cord mask and merge FA/MD/RD into an
    /// existing metrics CSV (run `quantify` first).
    Dti {
        /// Directory containing manifest.json with DWI stacks.
        #[arg(long)]
        dwi: PathBuf,
        /// Shared gradient table (b-value gx gy gz per line); default is
        /// each subject's own table from the manifest.
        #[arg(long)]
        bvecs: Option<PathBuf>,
        /// Directory containing manifest.json with label volumes.
        #[arg(long)]
        labels: PathBuf,
        /// Metrics CSV to update in place.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified FA vs SAC/CSA correlations with pairwise z-tests.
    Correlate {
        /// Metrics CSV from `quantify` + `dti`.
        #[arg(long)]
        metrics: PathBuf,
        /// Stratification key: gender, machine, or level.
        #[arg(long)]
        group_by: String,
        /// Comparisons CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Multiply p-values by the number of comparisons (clamped at 1).
        #[arg(long)]
        bonferroni: bool,
    },
    /// Check every backward rule against 64-bit finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Time attention forward passes across token counts.
    Bench {
        /// Attention kind: xca or msa.
        #[arg(long)]
        attention: String,
        /// Comma-separated token counts (msa requires perfect squares).
        #[arg(long, default_value = "256,1024,4096")]
        tokens: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Timing repeats per size; the minimum is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// CSV of timings to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; those exit 0, usage errors 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("cordseg: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<(), Error> {
    let strict_env = thread_cap()?;
    match command {
        Command::Synth {
            subjects,
            females,
            males,
            machines,
            out,
            seed,
            no_dwi,
        } => run_synth(subjects, females, males, machines, &out, seed, no_dwi),
        Command::Train {
            manifest,
            config,
            out,
            skip_mode,
            seed,
            epochs,
            strict,
        } => run_train(
            &manifest,
            config.as_deref(),
            &out,
            skip_mode.as_deref(),
            seed,
            epochs,
            strict || strict_env,
        ),
        Command::Segment {
            ckpt,
            input,
            out,
            manifest,
            out_dir,
        } => run_segment(&ckpt, input, out, manifest, out_dir),
        Command::Quantify { labels, out } => run_quantify(&labels, &out),
        Command::Dti {
            dwi,
            bvecs,
            labels,
            out,
        } => run_dti(&dwi, bvecs.as_deref(), &labels, &out),
        Command::Correlate {
            metrics,
            group_by,
            out,
            bonferroni,
        } => run_correlate(&metrics, &group_by, &out, bonferroni),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::Bench {
            attention,
            tokens,
            dim,
            heads,
            repeats,
            out,
            seed,
        } => run_bench_cmd(&attention, &tokens, dim, heads, repeats, &out, seed),
    }
}

/// Validate `CORDSEG_THREADS` and report whether it implies strict mode.
/// All kernels are single-threaded, so any positive cap is honored as-is.
fn thread_cap() -> Result<bool, Error> {
    match std::env::var("CORDSEG_THREADS") {
        Err(_) => Ok(false),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Validation(format!(
                "CORDSEG_THREADS={v:?} is not a positive integer"
            ))),
            Ok(n) => Ok(n == 1),
        },
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

// --- synth -----------------------------------------------------------------

fn run_synth(
    subjects: Option<usize>,
    females: usize,
    males: usize,
    machines: usize,
    out: &Path,
    seed: u64,
    no_dwi: bool,
) -> Result<(), Error> {
    let (females, males) = match subjects {
        None => (females, males),
        Some(n) => {
            let total = females + males;
            if total == 0 {
                return Err(Error::Validation(
                    "--subjects needs a nonzero --females/--males ratio to prorate".into(),
                ));
            }
            let f = ((n * females) as f64 / total as f64).round() as usize;
            let f = f.min(n);
            (f, n - f)
        }
    };
    let cfg = SynthConfig {
        with_dwi: !no_dwi,
        ..SynthConfig::default()
    };
    let plan = CohortPlan {
        females,
        males,
        machines,
    };
    let manifest = synthesize_cohort(&cfg, &plan, seed, out)?;
    println!(
        "synthesized {} subjects ({females} F, {males} M, {machines} machines) under seed {seed}",
        females + males
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

// --- train -----------------------------------------------------------------

/// Optional sections of the `--config` file; anything absent falls back to
/// defaults sized for the synthetic cohort.
#[derive(Default, serde::Deserialize)]
struct TrainFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

/// Default architecture for cohort training: small enough for a desk CPU,
/// two-channel input (intensity + slice position), one class per label.
fn desk_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        in_channels: INPUT_CHANNELS,
        num_classes,
        patch: 4,
        base_dim: 16,
        stage_depths: vec![1, 1],
        heads: vec![2, 4],
        window: 4,
        skip_mode: SkipMode::Attentive,
        drop_rate: 0.0,
    }
}

fn run_train(
    manifest_path: &Path,
    config: Option<&Path>,
    out: &Path,
    skip_mode: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
    _strict: bool,
) -> Result<(), Error> {
    let (manifest, root) = load_manifest(manifest_path)?;
    let (images, labels) = load_training_set(&manifest, &root)?;
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;

    let file: TrainFile = match config {
        None => TrainFile::default(),
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?,
    };
    let mut model_cfg = file
        .model
        .unwrap_or_else(|| desk_model_config(max_label + 1));
    if let Some(mode) = skip_mode {
        model_cfg.skip_mode = SkipMode::from_str(mode).map_err(Error::Validation)?;
    }
    let mut train_cfg = file.train.unwrap_or_default();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }

    if model_cfg.in_channels != INPUT_CHANNELS {
        return Err(Error::Validation(format!(
            "training inputs carry {INPUT_CHANNELS} channels (intensity + slice position) \
             but the config requests in_channels = {}",
            model_cfg.in_channels
        )));
    }
    if max_label >= model_cfg.num_classes {
        return Err(Error::Validation(format!(
            "labels go up to {max_label} but the config only has {} classes",
            model_cfg.num_classes
        )));
    }

    let mut store = ParamStore::<f32>::new();
    let mut init_rng = SeedRng::stream(train_cfg.seed, "model.init");
    let model = SattisUnet::new(&model_cfg, &mut store, &mut init_rng)?;
    let mut opt = AdamW::new(&train_cfg, &store);
    let mut epoch_rng = SeedRng::stream(train_cfg.seed, "train.epochs");

    println!(
        "training on {} slices ({} classes, skip mode {})",
        images.shape()[0],
        model_cfg.num_classes,
        model_cfg.skip_mode
    );
    for epoch in 1..=train_cfg.epochs {
        let tick = Instant::now();
        let loss = train_epoch(
            &model,
            &mut store,
            &mut opt,
            &images,
            &labels,
            &train_cfg,
            &mut epoch_rng,
        )?;
        println!(
            "epoch {epoch:>3}/{}: loss {loss:.5} ({:.1}s)",
            train_cfg.epochs,
            tick.elapsed().as_secs_f64()
        );
    }
    save_checkpoint(&model_cfg, &store, out)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

// --- segment ---------------------------------------------------------------

fn run_segment(
    ckpt: &Path,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<(), Error> {
    let (model, store) = load_checkpoint::<f32>(ckpt)?;
    if model.config.in_channels != INPUT_CHANNELS {
        return Err(Error::Validation(format!(
            "checkpoint {} expects {} input channels; this pipeline feeds {INPUT_CHANNELS}",
            ckpt.display(),
            model.config.in_channels
        )));
    }
    match (input, out, manifest, out_dir) {
        (Some(input), Some(out), None, None) => {
            let image = load_volume(&input)?;
            let labels = segment_volume(&model, &store, &image, SEGMENT_BATCH)?;
            save_volume(&labels, &out)?;
            println!("labels: {}", out.display());
            Ok(())
        }
        (None, None, Some(manifest_path), Some(dir)) => {
            let (src, root) = load_manifest(&manifest_path)?;
            fs::create_dir_all(&dir)
                .map_err(|e| Error::Validation(format!("{}: {e}", dir.display())))?;
            let mut subjects = Vec::with_capacity(src.subjects.len());
            for entry in &src.subjects {
                let image = load_volume(&root.join(&entry.image))?;
                let labels = segment_volume(&model, &store, &image, SEGMENT_BATCH)?;
                let rel = format!("{}_labels.raw", entry.id);
                save_volume(&labels, &dir.join(&rel))?;
                subjects.push(SubjectEntry {
                    id: entry.id.clone(),
                    gender: entry.gender,
                    machine: entry.machine,
                    image: absolute_str(&root, &entry.image)?,
                    labels: rel,
                    dwi: match &entry.dwi {
                        None => None,
                        Some(files) => Some(
                            files
                                .iter()
                                .map(|f| absolute_str(&root, f))
                                .collect::<Result<_, _>>()?,
                        ),
                    },
                    gradients: match &entry.gradients {
                        None => None,
                        Some(g) => Some(absolute_str(&root, g)?),
                    },
                });
            }
            let manifest = DatasetManifest { subjects };
            let path = dir.join("manifest.json");
            save_manifest(&manifest, &path)?;
            println!(
                "segmented {} subjects; manifest: {}",
                manifest.subjects.len(),
                path.display()
            );
            Ok(())
        }
        _ => Err(Error::Validation(
            "segment runs on --in IMG --out LABELS, or --manifest M --out-dir DIR".into(),
        )),
    }
}

/// Render `root/rel` as an absolute path string so a derived manifest keeps
/// working from its new directory.
fn absolute_str(root: &Path, rel: &str) -> Result<String, Error> {
    let joined = root.join(rel);
    let abs = std::path::absolute(&joined)
        .map_err(|e| Error::Validation(format!("{}: {e}", joined.display())))?;
    Ok(abs.to_string_lossy().into_owned())
}

// --- quantify --------------------------------------------------------------

fn run_quantify(labels_dir: &Path, out: &Path) -> Result<(), Error> {
    let (manifest, root) = load_manifest(&labels_dir.join("manifest.json"))?;
    let mut table = MetricsTable::default();
    for entry in &manifest.subjects {
        let volume = load_volume(&root.join(&entry.labels))?;
        let slices = all_slice_metrics(&volume.to_label_volume()?)?;
        for (level, summary) in per_level_aggregate(&slices) {
            table.push(MetricsRow {
                subject: entry.id.clone(),
                gender: entry.gender,
                machine: entry.machine,
                level,
                csa_mm2: Some(summary.csa_mm2),
                sac_mm2: Some(summary.sac_mm2),
                sac_csa_ratio: summary.ratio,
                fa: None,
                md: None,
                rd: None,
            })?;
        }
    }
    table.save(out)?;
    println!(
        "quantified {} subjects -> {} rows: {}",
        manifest.subjects.len(),
        table.rows.len(),
        out.display()
    );
    Ok(())
}

// --- dti -------------------------------------------------------------------

fn run_dti(
    dwi_dir: &Path,
    bvecs: Option<&Path>,
    labels_dir: &Path,
    out: &Path,
) -> Result<(), Error> {
    if !out.exists() {
        return Err(Error::Validation(format!(
            "{} not found: run `cordseg quantify` first, then `dti` merges into it",
            out.display()
        )));
    }
    let mut table = MetricsTable::load(out)?;
    let (dwi_manifest, dwi_root) = load_manifest(&dwi_dir.join("manifest.json"))?;
    let (label_manifest, label_root) = load_manifest(&labels_dir.join("manifest.json"))?;
    let shared = match bvecs {
        None => None,
        Some(path) => Some(parse_gradient_table(&read_text(path)?)?),
    };

    let mut fitted_subjects = 0usize;
    for entry in &dwi_manifest.subjects {
        let Some(dwi_files) = &entry.dwi else {
            continue; // no diffusion data for this subject
        };
        let gradients = match (&shared, &entry.gradients) {
            (Some(g), _) => g.clone(),
            (None, Some(rel)) => parse_gradient_table(&read_text(&dwi_root.join(rel))?)?,
            (None, None) => {
                return Err(Error::Validation(format!(
                    "subject {}: no gradient table in the manifest and no --bvecs",
                    entry.id
                )))
            }
        };
        if gradients.len() != dwi_files.len() {
            return Err(Error::Validation(format!(
                "subject {}: {} gradient rows for {} DWI stacks",
                entry.id,
                gradients.len(),
                dwi_files.len()
            )));
        }
        let label_entry = label_manifest
            .subjects
            .iter()
            .find(|l| l.id == entry.id)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "subject {} has DWI but no labels under {}",
                    entry.id,
                    labels_dir.display()
                ))
            })?;
        let label_volume = load_volume(&label_root.join(&label_entry.labels))?;
        let stacks: Vec<Volume> = dwi_files
            .iter()
            .map(|f| load_volume(&dwi_root.join(f)))
            .collect::<Result<_, _>>()?;
        for stack in &stacks {
            if stack.dims != label_volume.dims {
                return Err(Error::Validation(format!(
                    "subject {}: DWI dims {:?} do not match label dims {:?}",
                    entry.id, stack.dims, label_volume.dims
                )));
            }
        }
        let planes: Vec<&[f32]> = stacks
            .iter()
            .map(|s| s.as_f32())
            .collect::<Result<_, _>>()?;
        let label_data = label_volume.as_u8()?;

        // Fit only inside the cord mask; the level key comes straight from
        // the label value.
        let mut metrics = Vec::new();
        let mut levels = Vec::new();
        for (vi, &label) in label_data.iter().enumerate() {
            let Some(level) = level_of(label) else {
                continue;
            };
            let samples: Vec<DiffusionSample> = gradients
                .iter()
                .zip(&planes)
                .map(|(&(b, dir), plane)| DiffusionSample {
                    b,
                    dir,
                    signal: plane[vi] as f64,
                })
                .collect();
            let (_, voxel) = fit_voxel(&samples)?;
            metrics.push(voxel);
            levels.push(level);
        }
        let cord = vec![true; metrics.len()];
        for (level, lm) in per_level_metrics(&metrics, &levels, &cord)? {
            if !table.merge_dti(&entry.id, level, lm.fa, lm.md, lm.rd) {
                eprintln!(
                    "warning: no quantify row for subject {} level C{level}; FA dropped",
                    entry.id
                );
            }
        }
        fitted_subjects += 1;
    }
    table.save(out)?;
    println!(
        "fitted diffusion tensors for {fitted_subjects} subjects; updated {}",
        out.display()
    );
    Ok(())
}

// --- correlate -------------------------------------------------------------

fn run_correlate(metrics: &Path, group_by: &str, out: &Path, bonferroni: bool) -> Result<(), Error> {
    let table = MetricsTable::load(metrics)?;
    let samples = table.paired_samples();
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no rows with both sac_csa_ratio and fa; run `quantify` and `dti` first",
            metrics.display()
        )));
    }
    let group = GroupBy::from_str(group_by)?;
    let analysis = stratified_analysis(&samples, group, bonferroni)?;
    for c in &analysis.correlations {
        println!("stratum {}: r = {:+.4} (n = {})", c.stratum, c.r, c.n);
    }
    for c in &analysis.comparisons {
        println!(
            "{} vs {}: z = {:+.4}, p = {:.6}",
            c.a.stratum, c.b.stratum, c.z, c.p
        );
    }
    save_comparisons(&analysis.comparisons, out)?;
    println!("comparisons: {}", out.display());
    Ok(())
}

// --- gradcheck -------------------------------------------------------------

fn run_gradcheck(seed: u64) -> Result<(), Error> {
    let tick = Instant::now();
    let reports = gradcheck_suite(seed)?;
    let mut failures = 0usize;
    for r in &reports {
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<24} max rel err {:.3e} (tol {:.0e}, {} coords, worst {})",
            r.name, r.max_rel_err, r.tolerance, r.checked, r.worst_param
        );
        if !r.pass() {
            failures += 1;
        }
    }
    println!(
        "{} oracles in {:.1}s",
        reports.len(),
        tick.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(Error::Internal(format!(
            "{failures} gradient oracle(s) out of tolerance"
        )));
    }
    Ok(())
}

// --- bench -----------------------------------------------------------------

fn run_bench_cmd(
    attention: &str,
    tokens: &str,
    dim: usize,
    heads: usize,
    repeats: usize,
    out: &Path,
    seed: u64,
) -> Result<(), Error> {
    let kind = AttentionKind::from_str(attention).map_err(Error::Validation)?;
    let tokens: Vec<usize> = tokens
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad token count {t:?} in --tokens")))
        })
        .collect::<Result<_, _>>()?;
    let results = run_bench(kind, &tokens, dim, heads, repeats, seed)?;
    for r in &results {
        println!("{} {:>6} tokens: {:.4}s", r.attention, r.tokens, r.seconds);
    }
    if let Some(ratio) = scaling_ratio(&results, 1024, 4096) {
        println!("t(4096) / t(1024) = {ratio:.2}");
    }
    write_text(out, &bench_to_csv(&results))?;
    println!("timings: {}", out.display());
    Ok(())
}
