//! Tabular artifacts: the dataset manifest (JSON), the per-level metrics
//! table (CSV), the stratified comparison table (CSV), and the gradient
//! table (plain text).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::stats::{GroupComparison, PairedSample};

pub const GENDERS: [char; 2] = ['F', 'M'];
pub const MACHINES: [char; 3] = ['A', 'B', 'C'];

/// One subject in a dataset manifest. Paths are stored relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub gender: char,
    pub machine: char,
    pub image: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwi: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradients: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    fn validate(&self, root: Option<&Path>) -> Result<(), IoError> {
        for (i, s) in self.subjects.iter().enumerate() {
            if !GENDERS.contains(&s.gender) {
                return Err(IoError::Manifest(format!(
                    "subject {:?}: gender {:?} not in {GENDERS:?}",
                    s.id, s.gender
                )));
            }
            if !MACHINES.contains(&s.machine) {
                return Err(IoError::Manifest(format!(
                    "subject {:?}: machine {:?} not in {MACHINES:?}",
                    s.id, s.machine
                )));
            }
            if self.subjects[..i].iter().any(|p| p.id == s.id) {
                return Err(IoError::Manifest(format!("duplicate subject id {:?}", s.id)));
            }
            if let Some(root) = root {
                let mut paths = vec![s.image.clone(), s.labels.clone()];
                paths.extend(s.dwi.iter().flatten().cloned());
                paths.extend(s.gradients.clone());
                for rel in paths {
                    let p = root.join(&rel);
                    if !p.exists() {
                        return Err(IoError::Manifest(format!(
                            "subject {:?}: path {} does not exist",
                            s.id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Write the manifest next to its data files; paths inside must already be
/// relative to `path`'s directory.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), IoError> {
    manifest.validate(None)?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Load and validate a manifest; every referenced path must exist relative
/// to the manifest's directory. Returns the manifest and that root.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), IoError> {
    let text = fs::read_to_string(path)
        .map_err(|e| IoError::Manifest(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| IoError::Manifest(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    manifest.validate(Some(&root))?;
    Ok((manifest, root))
}

/// One `(subject, level)` row of the metrics table. `None` fields serialize
/// as empty cells — missing, never zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub subject: String,
    pub gender: char,
    pub machine: char,
    /// Vertebral level 1..=7 (written as C1..C7).
    pub level: u8,
    pub csa_mm2: Option<f64>,
    pub sac_mm2: Option<f64>,
    pub sac_csa_ratio: Option<f64>,
    pub fa: Option<f64>,
    pub md: Option<f64>,
    pub rd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "subject",
    "gender",
    "machine",
    "level",
    "csa_mm2",
    "sac_mm2",
    "sac_csa_ratio",
    "fa",
    "md",
    "rd",
];

fn cell(v: Option<f64>) -> String {
    // Display gives the shortest representation that round-trips exactly
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(field: &str, what: &str, line: usize) -> Result<Option<f64>, IoError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| {
        IoError::Csv(format!("row {line}: {what} value {field:?} is not a number"))
    })
}

fn parse_tag(field: &str, allowed: &[char], what: &str, line: usize) -> Result<char, IoError> {
    let mut chars = field.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if allowed.contains(&c) => Ok(c),
        _ => Err(IoError::Csv(format!(
            "row {line}: {what} {field:?} not in {allowed:?}"
        ))),
    }
}

fn parse_level(field: &str, line: usize) -> Result<u8, IoError> {
    let err = || IoError::Csv(format!("row {line}: level {field:?} is not C1..C7"));
    let digits = field.trim().strip_prefix('C').ok_or_else(err)?;
    let level: u8 = digits.parse().map_err(|_| err())?;
    if (1..=7).contains(&level) {
        Ok(level)
    } else {
        Err(err())
    }
}

impl MetricsTable {
    /// Enforce one row per (subject, level).
    pub fn push(&mut self, row: MetricsRow) -> Result<(), IoError> {
        if self
            .rows
            .iter()
            .any(|r| r.subject == row.subject && r.level == row.level)
        {
            return Err(IoError::Csv(format!(
                "duplicate row for subject {:?} level C{}",
                row.subject, row.level
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Attach DTI metrics to the row for `(subject, level)`; false when no
    /// such row exists.
    pub fn merge_dti(&mut self, subject: &str, level: u8, fa: f64, md: f64, rd: f64) -> bool {
        match self
            .rows
            .iter_mut()
            .find(|r| r.subject == subject && r.level == level)
        {
            Some(row) => {
                row.fa = Some(fa);
                row.md = Some(md);
                row.rd = Some(rd);
                true
            }
            None => false,
        }
    }

    pub fn to_csv_string(&self) -> Result<String, IoError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.subject.clone(),
                r.gender.to_string(),
                r.machine.to_string(),
                format!("C{}", r.level),
                cell(r.csa_mm2),
                cell(r.sac_mm2),
                cell(r.sac_csa_ratio),
                cell(r.fa),
                cell(r.md),
                cell(r.rd),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| IoError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_str(text: &str) -> Result<Self, IoError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        if headers.iter().ne(METRICS_HEADER) {
            return Err(IoError::Csv(format!(
                "unexpected header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut table = Self::default();
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let line = i + 2; // 1-based, after the header
            if record.len() != METRICS_HEADER.len() {
                return Err(IoError::Csv(format!(
                    "row {line}: expected {} fields, got {}",
                    METRICS_HEADER.len(),
                    record.len()
                )));
            }
            table.push(MetricsRow {
                subject: record[0].to_string(),
                gender: parse_tag(&record[1], &GENDERS, "gender", line)?,
                machine: parse_tag(&record[2], &MACHINES, "machine", line)?,
                level: parse_level(&record[3], line)?,
                csa_mm2: parse_cell(&record[4], "csa_mm2", line)?,
                sac_mm2: parse_cell(&record[5], "sac_mm2", line)?,
                sac_csa_ratio: parse_cell(&record[6], "sac_csa_ratio", line)?,
                fa: parse_cell(&record[7], "fa", line)?,
                md: parse_cell(&record[8], "md", line)?,
                rd: parse_cell(&record[9], "rd", line)?,
            })?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path)
            .map_err(|e| IoError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    /// Rows with both an SAC/CSA ratio (x) and an FA (y), as stats inputs.
    /// Rows missing either member are dropped — pairwise deletion.
    pub fn paired_samples(&self) -> Vec<PairedSample> {
        self.rows
            .iter()
            .filter_map(|r| {
                Some(PairedSample {
                    x: r.sac_csa_ratio?,
                    y: r.fa?,
                    gender: r.gender,
                    machine: r.machine,
                    level: r.level,
                })
            })
            .collect()
    }
}

/// Serialize stratified comparisons as
/// `stratumA,stratumB,rA,nA,rB,nB,z,p`.
pub fn comparisons_to_csv(comparisons: &[GroupComparison]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratumA", "stratumB", "rA", "nA", "rB", "nB", "z", "p"])?;
    for c in comparisons {
        w.write_record([
            c.a.stratum.clone(),
            c.b.stratum.clone(),
            c.a.r.to_string(),
            c.a.n.to_string(),
            c.b.r.to_string(),
            c.b.n.to_string(),
            c.z.to_string(),
            c.p.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn save_comparisons(comparisons: &[GroupComparison], path: &Path) -> Result<(), IoError> {
    fs::write(path, comparisons_to_csv(comparisons)?)?;
    Ok(())
}

/// Write a gradient table (`b gx gy gz` per line) readable by
/// `dti::parse_gradient_table`.
pub fn save_gradient_table(rows: &[(f64, [f64; 3])], path: &Path) -> Result<(), IoError> {
    let mut text = String::from("# b gx gy gz\n");
    for (b, d) in rows {
        text.push_str(&format!("{} {} {} {}\n", b, d[0], d[1], d[2]));
    }
    fs::write(path, text)?;
    Ok(())
}
