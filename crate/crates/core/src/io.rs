//! Persistent formats: experiment configs (TOML), metric reports (CSV), field snapshots
//! (little-endian f64 with a TOML sidecar) and the run manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bgc::{CONCENTRATION_SCALE, LENGTH_SCALE};
use crate::error::{Error, Result};
use crate::twin::{ExperimentConfig, KdeRecord, MetricRecord, MetricsReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.csv";
pub const KDE_FILE: &str = "kde.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn header(kind: &str, report: &MetricsReport) -> String {
    format!(
        "# gmmdo {kind} schema={SCHEMA_VERSION} experiment={} seed={}\n",
        report.experiment, report.seed
    )
}

/// Writes `metrics.csv` and `kde.csv`; each ends with a trailer holding the record count.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mpath = dir.join(METRICS_FILE);
    let mut out = String::new();
    out.push_str(&header("metrics", report));
    out.push_str("time,series,value\n");
    for r in &report.records {
        out.push_str(&format!("{},{},{}\n", r.time, r.series, r.value));
    }
    out.push_str(&format!("# end records={}\n", report.records.len()));
    fs::write(&mpath, out)?;

    let kpath = dir.join(KDE_FILE);
    let mut out = String::new();
    out.push_str(&header("kde", report));
    out.push_str("time,stage,param,x,density\n");
    for k in &report.kde {
        out.push_str(&format!("{},{},{},{},{}\n", k.time, k.stage, k.param, k.x, k.density));
    }
    out.push_str(&format!("# end records={}\n", report.kde.len()));
    fs::write(&kpath, out)?;
    Ok(vec![mpath, kpath])
}

struct Table {
    experiment: u8,
    seed: u64,
    rows: Vec<(usize, Vec<String>)>,
}

fn parse_err(file: &Path, record: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        record,
        message: message.into(),
    }
}

fn read_table(path: &Path, kind: &str, columns: &[&str]) -> Result<Table> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.ok_or_else(|| parse_err(path, 0, "empty file"))?;
    let fields: Vec<&str> = first.trim_start_matches('#').split_whitespace().collect();
    if fields.first() != Some(&"gmmdo") || fields.get(1) != Some(&kind) {
        return Err(parse_err(path, 0, format!("not a {kind} file")));
    }
    let kv = |key: &str| -> Option<&str> { fields.iter().find_map(|f| f.strip_prefix(key)?.strip_prefix('=')) };
    let schema: u32 = kv("schema")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(path, 0, "missing schema version"))?;
    if schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            found: schema,
            expected: SCHEMA_VERSION,
        });
    }
    let experiment = kv("experiment").and_then(|v| v.parse().ok()).unwrap_or(0);
    let seed = kv("seed").and_then(|v| v.parse().ok()).unwrap_or(0);
    let head = lines.next().transpose()?.ok_or_else(|| parse_err(path, 0, "missing column header"))?;
    if head.split(',').collect::<Vec<_>>() != columns {
        return Err(parse_err(path, 0, format!("expected columns {}", columns.join(","))));
    }
    let mut rows = Vec::new();
    let mut trailer = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let record = i + 1;
        if trailer.is_some() {
            return Err(parse_err(path, record, "data after end marker"));
        }
        if let Some(rest) = line.strip_prefix("# end records=") {
            let n: usize = rest.trim().parse().map_err(|_| parse_err(path, record, "bad end marker"))?;
            trailer = Some(n);
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != columns.len() {
            return Err(parse_err(
                path,
                record,
                format!("expected {} fields, found {}", columns.len(), cells.len()),
            ));
        }
        rows.push((record, cells));
    }
    match trailer {
        None => Err(parse_err(
            path,
            rows.len() + 1,
            format!("truncated after record {}: end marker missing", rows.len()),
        )),
        Some(n) if n != rows.len() => Err(parse_err(
            path,
            rows.len(),
            format!("end marker announces {n} records, found {}", rows.len()),
        )),
        Some(_) => Ok(Table { experiment, seed, rows }),
    }
}

fn num(path: &Path, record: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| parse_err(path, record, format!("not a number: {s:?}")))
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let mpath = dir.join(METRICS_FILE);
    let m = read_table(&mpath, "metrics", &["time", "series", "value"])?;
    let mut report = MetricsReport {
        experiment: m.experiment,
        seed: m.seed,
        ..MetricsReport::default()
    };
    for (rec, c) in &m.rows {
        report.records.push(MetricRecord {
            time: num(&mpath, *rec, &c[0])?,
            series: c[1].clone(),
            value: num(&mpath, *rec, &c[2])?,
        });
    }
    let kpath = dir.join(KDE_FILE);
    if kpath.exists() {
        let k = read_table(&kpath, "kde", &["time", "stage", "param", "x", "density"])?;
        for (rec, c) in &k.rows {
            report.kde.push(KdeRecord {
                time: num(&kpath, *rec, &c[0])?,
                stage: c[1].clone(),
                param: c[2].clone(),
                x: num(&kpath, *rec, &c[3])?,
                density: num(&kpath, *rec, &c[4])?,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub schema: u32,
    pub label: String,
    pub time: f64,
    pub dtype: String,
    pub layout: String,
    pub tracers: Vec<String>,
    pub nx: usize,
    pub nz: usize,
    pub lx: f64,
    pub lz: f64,
    pub n_values: usize,
    pub concentration_scale: f64,
    pub length_scale: f64,
}

impl SnapshotMeta {
    pub fn new(label: &str, time: f64, tracers: &[&str], cfg: &ExperimentConfig) -> Self {
        let (nx, nz) = (cfg.domain.nx, cfg.domain.nz);
        Self {
            schema: SCHEMA_VERSION,
            label: label.into(),
            time,
            dtype: "f64-le".into(),
            layout: "tracer-major; within a tracer cell c = j * nx + i, x index i fastest, row j = 0 at the bottom; solid cells hold 0"
                .into(),
            tracers: tracers.iter().map(|s| s.to_string()).collect(),
            nx,
            nz,
            lx: cfg.domain.lx,
            lz: cfg.domain.lz,
            n_values: tracers.len() * nx * nz,
            concentration_scale: CONCENTRATION_SCALE,
            length_scale: LENGTH_SCALE,
        }
    }
}

/// Writes `<stem>.bin` and its sidecar `<stem>.toml`.
pub fn write_snapshot(dir: &Path, stem: &str, meta: &SnapshotMeta, data: &[f64]) -> Result<Vec<PathBuf>> {
    if data.len() != meta.n_values {
        return Err(Error::Dimension {
            context: "snapshot length",
            expected: meta.n_values,
            got: data.len(),
        });
    }
    fs::create_dir_all(dir)?;
    let bin = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(8 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes)?;
    let side = dir.join(format!("{stem}.toml"));
    fs::write(&side, toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(vec![bin, side])
}

pub fn read_snapshot(dir: &Path, stem: &str) -> Result<(SnapshotMeta, Vec<f64>)> {
    let side = dir.join(format!("{stem}.toml"));
    let meta: SnapshotMeta =
        toml::from_str(&fs::read_to_string(&side)?).map_err(|e| parse_err(&side, 0, e.to_string()))?;
    if meta.schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            found: meta.schema,
            expected: SCHEMA_VERSION,
        });
    }
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin)?;
    if bytes.len() != 8 * meta.n_values {
        return Err(parse_err(
            &bin,
            bytes.len() / 8,
            format!("expected {} values, file holds {} bytes", meta.n_values, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect();
    Ok((meta, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    pub scale: f64,
    pub threads: usize,
    pub wall_seconds: f64,
    pub status: String,
    pub files: Vec<FileEntry>,
    /// Fully resolved configuration, non-dimensional.
    pub config: ExperimentConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Inventory of `files`, stored relative to `dir`.
pub fn inventory(dir: &Path, files: &[PathBuf]) -> Result<Vec<FileEntry>> {
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f)?;
        let rel = f.strip_prefix(dir).unwrap_or(f);
        out.push(FileEntry {
            path: rel.to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut f = fs::File::create(&path)?;
    f.write_all(text.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: RunManifest =
        toml::from_str(&fs::read_to_string(&path)?).map_err(|e| parse_err(&path, 0, e.to_string()))?;
    if m.schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            found: m.schema,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(m)
}

/// Wide CSV tables grouped by series prefix plus a matplotlib script that plots them.
pub fn emit_plots(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let groups = ["rmse_norm", "prior_rmse_norm", "mean", "std", "presence", "mode_var"];
    let mut written = Vec::new();
    for g in groups {
        let names: Vec<String> = report
            .series_names()
            .into_iter()
            .filter(|n| n.split_once(':').is_some_and(|(p, _)| p == g))
            .collect();
        if names.is_empty() {
            continue;
        }
        let times: Vec<f64> = report.series(&names[0]).iter().map(|(t, _)| *t).collect();
        let mut out = String::from("time");
        for n in &names {
            out.push(',');
            out.push_str(n.split_once(':').map_or(n.as_str(), |(_, q)| q));
        }
        out.push('\n');
        let cols: Vec<Vec<(f64, f64)>> = names.iter().map(|n| report.series(n)).collect();
        for (i, t) in times.iter().enumerate() {
            out.push_str(&t.to_string());
            for c in &cols {
                out.push(',');
                if let Some((_, v)) = c.get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        let path = dir.join(format!("{g}.csv"));
        fs::write(&path, out)?;
        written.push(path);
    }
    let script = dir.join("plot_metrics.py");
    fs::write(&script, PLOT_SCRIPT)?;
    written.push(script);
    Ok(written)
}

const PLOT_SCRIPT: &str = r#"# Plots every wide CSV table in this directory, one figure per table.
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

here = os.path.dirname(os.path.abspath(__file__))
for path in sorted(glob.glob(os.path.join(here, "*.csv"))):
    table = pd.read_csv(path)
    ax = table.set_index("time").plot(marker="o", figsize=(7, 4))
    ax.set_title(os.path.splitext(os.path.basename(path))[0])
    ax.set_xlabel("time")
    ax.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(os.path.splitext(path)[0] + ".png", dpi=120)
    plt.close()
"#;
