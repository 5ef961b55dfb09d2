//! Reading expression matrices and layouts, writing run outputs.
//!
//! Numbers are written in Rust's shortest round-trip form, so a value read
//! back parses to the identical `f64`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::cluster::{ClusterAssignment, UNASSIGNED};
use crate::error::{Error, Result};
use crate::model::ObservationModel;
use crate::structures::{ExperimentLayout, OrderedStructure};

/// Shortest round-trip form, switching to exponent notation for very small
/// or very large magnitudes.
#[derive(Clone, Copy, Debug)]
pub struct Num(pub f64);

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
            write!(f, "{}", self.0)
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Delimiter {
    Tab,
    Comma,
}

impl Delimiter {
    fn char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
        }
    }

    /// Comma for `.csv` files, tab otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Delimiter::Comma,
            _ => Delimiter::Tab,
        }
    }
}

/// Rows × samples matrix with identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    pub row_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub values: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReadOptions {
    pub model: ObservationModel,
    pub delimiter: Delimiter,
    /// Replace gamma-model values below this with it (off when `None`).
    pub floor: Option<f64>,
}

impl ReadOptions {
    pub fn new(model: ObservationModel) -> Self {
        ReadOptions {
            model,
            delimiter: Delimiter::Tab,
            floor: None,
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ingest(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Reads a matrix whose header row lists sample ids and whose first column
/// holds row ids.
pub fn read_matrix(path: &Path, opts: &ReadOptions) -> Result<DataMatrix> {
    let text = read_to_string(path)?;
    let delim = opts.delimiter.char();
    let mut it = lines(&text);
    let (_, header) = it.next().ok_or_else(|| ingest(path, 1, "empty file"))?;
    let sample_ids: Vec<String> = header.split(delim).skip(1).map(|s| s.trim().to_string()).collect();
    if sample_ids.is_empty() {
        return Err(ingest(path, 1, "header has no sample columns"));
    }
    let mut seen = HashSet::new();
    for id in &sample_ids {
        if !seen.insert(id.as_str()) {
            return Err(ingest(path, 1, format!("duplicate sample id {id:?}")));
        }
    }
    let n = sample_ids.len();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    let mut seen_rows = HashSet::new();
    for (line_no, line) in it {
        let mut fields = line.split(delim);
        let id = fields.next().unwrap_or_default().trim().to_string();
        if !seen_rows.insert(id.clone()) {
            return Err(ingest(path, line_no, format!("duplicate row id {id:?}")));
        }
        let cells: Vec<&str> = fields.collect();
        if cells.len() != n {
            return Err(ingest(
                path,
                line_no,
                format!("row {id:?} has {} values, header has {n} samples", cells.len()),
            ));
        }
        for (j, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            let mut v: f64 = cell
                .parse()
                .map_err(|_| ingest(path, line_no, format!("row {id:?}, column {:?}: invalid number {cell:?}", sample_ids[j])))?;
            if !v.is_finite() {
                return Err(ingest(path, line_no, format!("row {id:?}, column {:?}: missing or non-finite value", sample_ids[j])));
            }
            match opts.model {
                ObservationModel::Gamma => {
                    if let Some(eps) = opts.floor {
                        v = v.max(eps);
                    }
                    if v <= 0.0 {
                        return Err(ingest(
                            path,
                            line_no,
                            format!(
                                "row {id:?}, column {:?}: value {v} is not positive (gamma model; see --floor)",
                                sample_ids[j]
                            ),
                        ));
                    }
                }
                ObservationModel::Counts => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(ingest(
                            path,
                            line_no,
                            format!("row {id:?}, column {:?}: {cell:?} is not a non-negative integer count", sample_ids[j]),
                        ));
                    }
                }
            }
            values.push(v);
        }
        row_ids.push(id);
    }
    if row_ids.is_empty() {
        return Err(ingest(path, 1, "no data rows"));
    }
    let values = Array2::from_shape_vec((row_ids.len(), n), values).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(DataMatrix {
        row_ids,
        sample_ids,
        values,
    })
}

/// Writes a matrix in the same layout [`read_matrix`] accepts.
pub fn write_matrix(path: &Path, matrix: &DataMatrix, delimiter: Delimiter) -> Result<()> {
    let d = delimiter.char();
    let mut out = String::from("id");
    for s in &matrix.sample_ids {
        write!(out, "{d}{s}").ok();
    }
    out.push('\n');
    for (id, row) in matrix.row_ids.iter().zip(matrix.values.rows()) {
        out.push_str(id);
        for v in row {
            write!(out, "{d}{}", Num(*v)).ok();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Layout plus the identifiers that produced it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayoutInfo {
    /// Sample ids in layout order (matrix column order when one was given).
    pub sample_ids: Vec<String>,
    /// Original group names; entry `j - 1` was relabeled to `j`.
    pub group_names: Vec<String>,
}

/// Reads `sample<TAB>group[<TAB>library_size]` lines. Groups are relabeled
/// `1..p` by first appearance in the file. When `matrix_samples` is given the layout is
/// reordered to match the matrix columns.
pub fn read_layout(path: &Path, matrix_samples: Option<&[String]>) -> Result<(ExperimentLayout, LayoutInfo)> {
    let text = read_to_string(path)?;
    let delim = Delimiter::for_path(path).char();
    let mut entries: Vec<(usize, String, String, Option<f64>)> = Vec::new();
    for (idx, (line_no, line)) in lines(&text).enumerate() {
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if idx == 0 && matches!(fields[0].to_ascii_lowercase().as_str(), "sample" | "sample_id" | "id") {
            continue;
        }
        if fields.len() < 2 || fields.len() > 3 {
            return Err(ingest(path, line_no, format!("expected 2 or 3 columns, found {}", fields.len())));
        }
        let size = match fields.get(2) {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| ingest(path, line_no, format!("invalid library size {s:?}")))?,
            ),
            None => None,
        };
        if fields[1].is_empty() {
            return Err(ingest(path, line_no, "empty group label"));
        }
        entries.push((line_no, fields[0].to_string(), fields[1].to_string(), size));
    }
    if entries.is_empty() {
        return Err(ingest(path, 1, "layout is empty"));
    }
    let with_sizes = entries.iter().filter(|e| e.3.is_some()).count();
    if with_sizes != 0 && with_sizes != entries.len() {
        return Err(ingest(path, entries[0].0, "library sizes must be given for every sample or none"));
    }
    let mut seen = HashSet::new();
    for (line_no, id, _, _) in &entries {
        if !seen.insert(id.clone()) {
            return Err(ingest(path, *line_no, format!("duplicate sample {id:?}")));
        }
    }

    let ordered: Vec<&(usize, String, String, Option<f64>)> = match matrix_samples {
        Some(samples) => {
            let by_id: HashMap<&str, &(usize, String, String, Option<f64>)> =
                entries.iter().map(|e| (e.1.as_str(), e)).collect();
            let mut out = Vec::with_capacity(samples.len());
            for s in samples {
                out.push(
                    *by_id
                        .get(s.as_str())
                        .ok_or_else(|| ingest(path, 1, format!("matrix sample {s:?} is missing from the layout")))?,
                );
            }
            let matrix_set: HashSet<&str> = samples.iter().map(String::as_str).collect();
            if let Some(extra) = entries.iter().find(|e| !matrix_set.contains(e.1.as_str())) {
                return Err(ingest(path, extra.0, format!("layout sample {:?} is not in the matrix", extra.1)));
            }
            out
        }
        None => entries.iter().collect(),
    };

    let mut group_names: Vec<String> = Vec::new();
    for e in &entries {
        if !group_names.contains(&e.2) {
            group_names.push(e.2.clone());
        }
    }
    let group_of: Vec<usize> = ordered
        .iter()
        .map(|e| group_names.iter().position(|g| g == &e.2).expect("collected above") + 1)
        .collect();
    let sizes = (with_sizes > 0).then(|| ordered.iter().map(|e| e.3.expect("checked")).collect());
    let layout = ExperimentLayout::new(group_of, sizes)?;
    Ok((
        layout,
        LayoutInfo {
            sample_ids: ordered.iter().map(|e| e.1.clone()).collect(),
            group_names,
        },
    ))
}

pub fn write_layout(path: &Path, layout: &ExperimentLayout, info: &LayoutInfo) -> Result<()> {
    let mut out = String::from("sample\tgroup");
    if layout.library_sizes().is_some() {
        out.push_str("\tlibrary_size");
    }
    out.push('\n');
    for (i, id) in info.sample_ids.iter().enumerate() {
        let group = &info.group_names[layout.group_of()[i] - 1];
        write!(out, "{id}\t{group}").ok();
        if let Some(sizes) = layout.library_sizes() {
            write!(out, "\t{}", Num(sizes[i])).ok();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_weights(path: &Path, catalog: &[OrderedStructure], weights: &[f64]) -> Result<()> {
    let mut out = String::from("structure\tweight\n");
    for (eta, w) in catalog.iter().zip(weights) {
        writeln!(out, "{eta}\t{}", Num(*w)).ok();
    }
    write_file(path, &out)
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = String::from("iteration\tloglik\n");
    for (i, v) in trace.iter().enumerate() {
        writeln!(out, "{i}\t{}", Num(*v)).ok();
    }
    write_file(path, &out)
}

pub fn write_posterior(path: &Path, row_ids: &[String], catalog: &[OrderedStructure], posterior: &Array2<f64>) -> Result<()> {
    let mut out = String::from("id");
    for eta in catalog {
        write!(out, "\t{eta}").ok();
    }
    out.push('\n');
    for (id, row) in row_ids.iter().zip(posterior.rows()) {
        out.push_str(id);
        for v in row {
            write!(out, "\t{}", Num(*v)).ok();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// A posterior table read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable {
    pub row_ids: Vec<String>,
    pub structures: Vec<String>,
    pub values: Array2<f64>,
}

pub fn read_posterior(path: &Path) -> Result<PosteriorTable> {
    let text = read_to_string(path)?;
    let mut it = lines(&text);
    let (_, header) = it.next().ok_or_else(|| ingest(path, 1, "empty file"))?;
    let structures: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let k = structures.len();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for (line_no, line) in it {
        let mut fields = line.split('\t');
        row_ids.push(fields.next().unwrap_or_default().to_string());
        let cells: Vec<&str> = fields.collect();
        if cells.len() != k {
            return Err(ingest(path, line_no, format!("expected {k} posterior columns, found {}", cells.len())));
        }
        for c in cells {
            values.push(c.parse::<f64>().map_err(|_| ingest(path, line_no, format!("invalid number {c:?}")))?);
        }
    }
    let values = Array2::from_shape_vec((row_ids.len(), k), values).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(PosteriorTable {
        row_ids,
        structures,
        values,
    })
}

/// `id, structure, posterior, cluster` per row. Cluster ids are 1-based
/// catalog indices; rows below threshold get `UNASSIGNED`.
pub fn write_assignments(
    path: &Path,
    row_ids: &[String],
    structures: &[String],
    assignment: &ClusterAssignment,
) -> Result<()> {
    let mut out = String::from("id\tstructure\tposterior\tcluster\n");
    for (id, r) in row_ids.iter().zip(&assignment.rows) {
        let cluster = if r.assigned {
            (r.structure + 1).to_string()
        } else {
            UNASSIGNED.to_string()
        };
        writeln!(out, "{id}\t{}\t{}\t{cluster}", structures[r.structure], Num(r.posterior)).ok();
    }
    write_file(path, &out)
}

/// Reads `(row id, cluster label)` pairs from an assignment file: the first
/// column is the row id and the label comes from a `cluster` column, or the
/// last column when no header names one.
pub fn read_assignment_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_to_string(path)?;
    let delim = Delimiter::for_path(path).char();
    let mut it = lines(&text).peekable();
    let (_, first) = *it.peek().ok_or_else(|| ingest(path, 1, "empty file"))?;
    let header: Vec<&str> = first.split(delim).collect();
    let label_col = header.iter().position(|h| h.trim().eq_ignore_ascii_case("cluster"));
    if label_col.is_some() || header[0].trim().eq_ignore_ascii_case("id") {
        it.next();
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in it {
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() < 2 {
            return Err(ingest(path, line_no, "expected at least two columns"));
        }
        let col = label_col.unwrap_or(fields.len() - 1);
        let label = fields
            .get(col)
            .ok_or_else(|| ingest(path, line_no, "missing cluster column"))?;
        if !seen.insert(fields[0].to_string()) {
            return Err(ingest(path, line_no, format!("duplicate row id {:?}", fields[0])));
        }
        out.push((fields[0].to_string(), label.to_string()));
    }
    Ok(out)
}

/// Per-cluster mean of standardized group profiles: replicates are averaged
/// within each group, each row's group means are centred and scaled to unit
/// standard deviation, and the result is averaged over cluster members.
pub fn write_profiles(
    path: &Path,
    data: &Array2<f64>,
    layout: &ExperimentLayout,
    group_names: &[String],
    structures: &[String],
    assignment: &ClusterAssignment,
) -> Result<()> {
    let p = layout.p();
    let reps: Vec<Vec<usize>> = (1..=p).map(|j| layout.replicates(j)).collect();
    let standardized = |g: usize| -> Vec<f64> {
        let row = data.row(g);
        let means: Vec<f64> = reps
            .iter()
            .map(|r| r.iter().map(|&i| row[i]).sum::<f64>() / r.len() as f64)
            .collect();
        let centre = means.iter().sum::<f64>() / p as f64;
        let sd = (means.iter().map(|m| (m - centre).powi(2)).sum::<f64>() / p as f64).sqrt();
        means
            .iter()
            .map(|m| if sd > 0.0 { (m - centre) / sd } else { 0.0 })
            .collect()
    };
    let mut out = String::from("cluster\tstructure\tsize");
    for name in group_names {
        write!(out, "\t{name}").ok();
    }
    out.push('\n');
    for (index, members) in assignment.members.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut acc = vec![0.0; p];
        for &g in members {
            for (a, z) in acc.iter_mut().zip(standardized(g)) {
                *a += z;
            }
        }
        write!(out, "{}\t{}\t{}", index + 1, structures[index], members.len()).ok();
        for a in acc {
            write!(out, "\t{}", Num(a / members.len() as f64)).ok();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Paths of the files a `fit` run produces inside its output directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputPaths {
    pub weights: PathBuf,
    pub loglik: PathBuf,
    pub posterior: PathBuf,
    pub assignments: PathBuf,
    pub profiles: PathBuf,
    pub manifest: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        OutputPaths {
            weights: dir.join("weights.tsv"),
            loglik: dir.join("loglik.tsv"),
            posterior: dir.join("posterior.tsv"),
            assignments: dir.join("assignments.tsv"),
            profiles: dir.join("profiles.tsv"),
            manifest: dir.join("manifest.json"),
        }
    }
}
