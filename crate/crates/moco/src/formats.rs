//! Text formats: instance JSONL, weight and front CSV, metrics CSV and JSON
//! reports. Every float is written with 17 significant digits so that
//! reading a file back reproduces the exact bits.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use moco_core::decomposition::WeightVector;
use moco_core::pareto::{gap, hypervolume, HvFrame, ParetoArchive};
use moco_core::problems::{Instance, ObjectiveVector, Problem};
use moco_core::training::{Algorithm, StepRecord, VarianceEntry};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{MocoError, Result};

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MocoError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| MocoError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MocoError::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

// -------------------------------------------------------------------------
// Instances

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    problem: Problem,
    n: usize,
    kappa: usize,
    features: Vec<Vec<f64>>,
    capacity: Option<f64>,
}

pub fn instance_line(inst: &Instance) -> String {
    let mut s = format!(
        "{{\"problem\":\"{}\",\"n\":{},\"kappa\":{},\"features\":[",
        inst.problem(),
        inst.size(),
        inst.kappa()
    );
    for (i, f) in inst.features().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push('[');
        for (j, v) in f.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&fmt_f64(*v));
        }
        s.push(']');
    }
    s.push_str("],\"capacity\":");
    match inst.capacity() {
        Some(c) => s.push_str(&fmt_f64(c)),
        None => s.push_str("null"),
    }
    s.push('}');
    s
}

pub fn parse_instance_line(line: &str) -> std::result::Result<Instance, String> {
    let r: InstanceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Instance::new(r.problem, r.n, r.kappa, r.features, r.capacity).map_err(|e| e.to_string())
}

pub fn instances_to_string(header: &str, instances: &[Instance]) -> String {
    let mut s = format!("# {header}\n");
    for inst in instances {
        s.push_str(&instance_line(inst));
        s.push('\n');
    }
    s
}

pub fn write_instances(path: &Path, header: &str, instances: &[Instance]) -> Result<()> {
    write_file(path, instances_to_string(header, instances).as_bytes())
}

pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| MocoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MocoError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(parse_instance_line(t).map_err(|m| MocoError::format(path, i + 1, m))?);
    }
    Ok(out)
}

// -------------------------------------------------------------------------
// Weight and front CSV

pub fn rows_to_csv<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut s = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_csv_rows(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut width = None;
    let mut rows = Vec::new();
    for (line, l) in data_lines(text) {
        let row = l
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MocoError::format(path, line, format!("bad number: {e}")))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(MocoError::format(path, line, format!("expected {w} columns, got {}", row.len())))
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn weights_to_csv(weights: &[WeightVector]) -> String {
    rows_to_csv(weights.iter().map(WeightVector::as_slice))
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightVector>> {
    let text = read_to_string(path)?;
    let rows = parse_csv_rows(path, &text)?;
    let lines: Vec<usize> = data_lines(&text).map(|(l, _)| l).collect();
    rows.into_iter()
        .zip(lines)
        .map(|(r, line)| WeightVector::new(r).map_err(|e| MocoError::format(path, line, e.to_string())))
        .collect()
}

pub fn front_to_csv(points: &[ObjectiveVector]) -> String {
    rows_to_csv(points.iter().map(|p| p.values.as_slice()))
}

// -------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvReport {
    pub hv: f64,
    pub normalized_hv: f64,
    pub gap: Option<f64>,
    pub n_points: usize,
    pub frame: HvFrame,
}

pub fn hv_report(archive: &ParetoArchive, frame: &HvFrame, hv_ref: Option<f64>) -> Result<HvReport> {
    let hv = hypervolume(archive, frame)?;
    let normalized_hv = hv / frame.box_volume();
    let gap = hv_ref.map(|r| gap(normalized_hv, r)).transpose()?;
    Ok(HvReport { hv, normalized_hv, gap, n_points: archive.len(), frame: frame.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReportJson {
    pub mean_hv: f64,
    pub gap: Option<f64>,
    pub n_instances: usize,
    pub n_weights: usize,
    pub augment: bool,
    pub wall_ms: u64,
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MocoError::format(path, e.line(), e.to_string()))
}

// -------------------------------------------------------------------------
// Metrics and variance CSV

pub const METRICS_HEADER: &str = "step,algorithm,loss,validation_hv,grad_variance,wall_ms";

pub fn metrics_row(r: &StepRecord, wall_ms: u64) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step,
        r.algorithm,
        fmt_opt(r.loss),
        fmt_opt(r.validation_hv),
        fmt_opt(r.grad_variance),
        wall_ms
    )
}

/// One parsed metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub algorithm: Algorithm,
    pub loss: Option<f64>,
    pub validation_hv: Option<f64>,
    pub grad_variance: Option<f64>,
    pub wall_ms: u64,
}

pub fn parse_metrics(path: &Path, text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(MocoError::format(path, 1, "missing metrics header")),
    }
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| MocoError::format(path, line, format!("{e}")))
        }
    };
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let c: Vec<&str> = l.split(',').collect();
        if c.len() != 6 {
            return Err(MocoError::format(path, line, format!("expected 6 columns, got {}", c.len())));
        }
        let bad = |e: String| MocoError::format(path, line, e);
        rows.push(MetricsRow {
            step: c[0].parse().map_err(|e| bad(format!("{e}")))?,
            algorithm: c[1].parse().map_err(|e: moco_core::Error| bad(e.to_string()))?,
            loss: opt(c[2], line)?,
            validation_hv: opt(c[3], line)?,
            grad_variance: opt(c[4], line)?,
            wall_ms: c[5].parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    Ok(rows)
}

/// Streams metrics rows to a file.
pub struct MetricsWriter {
    out: std::io::BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| MocoError::io(path, e))?;
        let mut w = MetricsWriter { out: std::io::BufWriter::new(file), path: path.to_path_buf() };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    pub fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| MocoError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| MocoError::io(&self.path, e))
    }
}

pub fn variance_csv(log: &[VarianceEntry]) -> String {
    let mut s = String::from("batch,algorithm,grad_variance\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.batch, e.algorithm, fmt_f64(e.variance));
    }
    s
}

pub fn routing_header(n_experts: usize) -> String {
    let mut s = String::from("step");
    for j in 0..n_experts {
        let _ = write!(s, ",expert{j}");
    }
    s.push_str(",identity");
    s
}

pub fn routing_row(r: &StepRecord) -> String {
    let mut s = r.step.to_string();
    for u in &r.expert_usage {
        let _ = write!(s, ",{u}");
    }
    s
}
