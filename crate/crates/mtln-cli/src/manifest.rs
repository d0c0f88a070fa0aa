//! CSV files: dataset manifest, external annotation list, loss log,
//! metrics report, and inference output. Floats print through Rust's
//! shortest round-trip `Display`, so reruns with equal inputs reproduce
//! every file byte for byte.

use std::fs::File;
use std::path::Path;

use mtln_core::data::Split;
use mtln_core::ellipse::EllipseParams;
use mtln_core::metrics::CaseReport;
use mtln_core::train::EpochLog;

use crate::{CliError, Result};

pub const MANIFEST_HEADER: [&str; 10] = [
    "id",
    "filename",
    "split",
    "pixel_size_mm",
    "cx",
    "cy",
    "a",
    "b",
    "theta",
    "lineage",
];

pub const EXTERNAL_HEADER: [&str; 7] =
    ["filename", "pixel_size_mm", "cx", "cy", "a", "b", "theta"];

pub const METRICS_HEADER: [&str; 9] = [
    "case_id",
    "dsc",
    "hc_pred_mm",
    "hc_gt_mm",
    "df_mm",
    "adf_mm",
    "hd_px",
    "hd_mm",
    "failed",
];

pub const LOSS_LOG_HEADER: [&str; 4] = ["epoch", "train_loss", "val_loss", "val_dsc"];

pub const INFER_HEADER: [&str; 7] = ["filename", "cx", "cy", "a", "b", "theta", "hc_mm"];

/// One dataset sample as recorded on disk. The ellipse is ground truth in
/// pixel units; `filename` is relative to the dataset's image directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub filename: String,
    pub split: Split,
    pub pixel_size_mm: f64,
    pub ellipse: EllipseParams,
    pub lineage: String,
}

/// One row of an external annotation list (no split, no lineage).
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRow {
    pub filename: String,
    pub pixel_size_mm: f64,
    pub ellipse: EllipseParams,
}

/// One inference result. `ellipse`/`hc_mm` are None when the checkpoint
/// has no regression head or the prediction could not be fitted; those
/// columns stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct InferRow {
    pub filename: String,
    pub ellipse: Option<EllipseParams>,
    pub hc_mm: Option<f64>,
}

/// Shortest decimal representation that parses back to the same bits.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn new_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn new_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_fail(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Format(format!("{}: {e}", path.display()))
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(CliError::Format(format!(
            "{}: header is {:?}, expected {:?}",
            path.display(),
            got.iter().collect::<Vec<_>>(),
            want
        )));
    }
    Ok(())
}

/// 1-based line number of a record, for error messages.
fn rec_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn field_f64(path: &Path, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|_| {
        CliError::Format(format!(
            "{} line {}: bad {name} value {raw:?}",
            path.display(),
            rec_line(rec)
        ))
    })
}

fn field_ellipse(path: &Path, rec: &csv::StringRecord, start: usize) -> Result<EllipseParams> {
    Ok(EllipseParams {
        cx: field_f64(path, rec, start, "cx")?,
        cy: field_f64(path, rec, start + 1, "cy")?,
        a: field_f64(path, rec, start + 2, "a")?,
        b: field_f64(path, rec, start + 3, "b")?,
        theta: field_f64(path, rec, start + 4, "theta")?,
    })
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let fail = csv_fail(path);
    let mut w = new_writer(path)?;
    w.write_record(MANIFEST_HEADER).map_err(&fail)?;
    for r in rows {
        let e = &r.ellipse;
        w.write_record([
            r.id.clone(),
            r.filename.clone(),
            r.split.as_str().to_owned(),
            num(r.pixel_size_mm),
            num(e.cx),
            num(e.cy),
            num(e.a),
            num(e.b),
            num(e.theta),
            r.lineage.clone(),
        ])
        .map_err(&fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let fail = csv_fail(path);
    let mut rdr = new_reader(path)?;
    check_header(path, rdr.headers().map_err(&fail)?, &MANIFEST_HEADER)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(&fail)?;
        let split_raw = rec.get(2).unwrap_or("");
        let split = Split::parse(split_raw).ok_or_else(|| {
            CliError::Format(format!(
                "{} line {}: unknown split {split_raw:?}",
                path.display(),
                rec_line(&rec)
            ))
        })?;
        rows.push(ManifestRow {
            id: rec.get(0).unwrap_or("").to_owned(),
            filename: rec.get(1).unwrap_or("").to_owned(),
            split,
            pixel_size_mm: field_f64(path, &rec, 3, "pixel_size_mm")?,
            ellipse: field_ellipse(path, &rec, 4)?,
            lineage: rec.get(9).unwrap_or("").to_owned(),
        });
    }
    Ok(rows)
}

pub fn read_external(path: &Path) -> Result<Vec<ExternalRow>> {
    let fail = csv_fail(path);
    let mut rdr = new_reader(path)?;
    check_header(path, rdr.headers().map_err(&fail)?, &EXTERNAL_HEADER)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(&fail)?;
        rows.push(ExternalRow {
            filename: rec.get(0).unwrap_or("").to_owned(),
            pixel_size_mm: field_f64(path, &rec, 1, "pixel_size_mm")?,
            ellipse: field_ellipse(path, &rec, 2)?,
        });
    }
    Ok(rows)
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let fail = csv_fail(path);
    let mut w = new_writer(path)?;
    w.write_record(LOSS_LOG_HEADER).map_err(&fail)?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            num(row.train_loss),
            num(row.val_loss),
            num(row.val_dsc),
        ])
        .map_err(&fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn write_metrics(path: &Path, reports: &[CaseReport]) -> Result<()> {
    let fail = csv_fail(path);
    let mut w = new_writer(path)?;
    w.write_record(METRICS_HEADER).map_err(&fail)?;
    for r in reports {
        w.write_record([
            r.case_id.clone(),
            num(r.dsc),
            opt(r.hc_pred_mm),
            num(r.hc_gt_mm),
            opt(r.df_mm),
            opt(r.adf_mm),
            opt(r.hd_px),
            opt(r.hd_mm),
            r.failed.to_string(),
        ])
        .map_err(&fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn write_infer(path: &Path, rows: &[InferRow]) -> Result<()> {
    let fail = csv_fail(path);
    let mut w = new_writer(path)?;
    w.write_record(INFER_HEADER).map_err(&fail)?;
    for r in rows {
        let e = r.ellipse;
        let part = |f: fn(&EllipseParams) -> f64| opt(e.as_ref().map(f));
        w.write_record([
            r.filename.clone(),
            part(|e| e.cx),
            part(|e| e.cy),
            part(|e| e.a),
            part(|e| e.b),
            part(|e| e.theta),
            opt(r.hc_mm),
        ])
        .map_err(&fail)?;
    }
    w.flush().map_err(CliError::io(path))
}
