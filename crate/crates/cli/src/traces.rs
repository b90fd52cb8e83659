//! CSV emission and strict re-reading of run traces. Column orders are
//! part of the output contract and never change; floats are written in
//! shortest round-trip form, so identical runs produce byte-identical
//! files.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sfac_core::driver::RunHistory;

/// One `sfac_trace.csv` row: the outer-round record. Oracle columns are
/// empty on rounds where exact evaluation was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfacTraceRow {
    pub k: usize,
    pub alpha_k: f64,
    pub beta_k: f64,
    #[serde(rename = "J_avg_exact")]
    pub j_avg_exact: Option<f64>,
    pub grad_norm_sq_exact: Option<f64>,
    pub critic_err_sq: Option<f64>,
    pub selected_flag: u8,
}

/// One `fedc_trace.csv` row: critic aggregation detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedcTraceCsvRow {
    pub outer_k: usize,
    pub inner_t: usize,
    pub critic_err_sq: Option<f64>,
    pub grad_avg_norm: f64,
}

/// One `feda_trace.csv` row: actor gradient norms, per agent plus a
/// `mean` row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedaTraceCsvRow {
    pub k: usize,
    pub agent_id: String,
    pub h_norm: f64,
}

pub fn write_sfac_trace(path: &Path, history: &RunHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for record in &history.rounds {
        w.serialize(SfacTraceRow {
            k: record.k,
            alpha_k: record.alpha_k,
            beta_k: record.beta_k,
            j_avg_exact: record.j_avg_exact,
            grad_norm_sq_exact: record.grad_norm_sq_exact,
            critic_err_sq: record.critic_err_sq,
            selected_flag: u8::from(record.k == history.selected),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fedc_trace(path: &Path, history: &RunHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in &history.fedc_trace {
        w.serialize(FedcTraceCsvRow {
            outer_k: row.outer_k,
            inner_t: row.inner_t,
            critic_err_sq: row.critic_err_sq,
            grad_avg_norm: row.grad_avg_norm,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_feda_trace(path: &Path, history: &RunHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for row in &history.feda_trace {
        w.serialize(FedaTraceCsvRow {
            k: row.outer_k,
            agent_id: match row.agent {
                Some(i) => i.to_string(),
                None => "mean".to_string(),
            },
            h_norm: row.grad_norm,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace back, enforcing the exact header and attributing parse
/// failures to their row.
pub fn read_sfac_trace(path: &Path) -> Result<Vec<SfacTraceRow>> {
    read_checked(
        path,
        &[
            "k",
            "alpha_k",
            "beta_k",
            "J_avg_exact",
            "grad_norm_sq_exact",
            "critic_err_sq",
            "selected_flag",
        ],
    )
}

pub fn read_fedc_trace(path: &Path) -> Result<Vec<FedcTraceCsvRow>> {
    read_checked(
        path,
        &["outer_k", "inner_t", "critic_err_sq", "grad_avg_norm"],
    )
}

fn read_checked<T: for<'de> Deserialize<'de>>(
    path: &Path,
    expected_header: &[&str],
) -> Result<Vec<T>> {
    let file =
        File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header {
        bail!(
            "{}: header {:?} does not match the expected {:?}",
            path.display(),
            got,
            expected_header
        );
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: T = record
            .with_context(|| format!("{} row {}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Reads any summary-style CSV into its header and all-float rows; used by
/// the sweep plot. Empty fields are rejected with their row number.
pub fn read_float_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file =
        File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        bail!("{} has an empty header", path.display());
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let mut row = Vec::with_capacity(header.len());
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.parse().with_context(|| {
                format!(
                    "{} row {}: column {} holds {:?}, expected a number",
                    path.display(),
                    i + 1,
                    header.get(j).map(String::as_str).unwrap_or("?"),
                    field
                )
            })?;
            row.push(value);
        }
        if row.len() != header.len() {
            bail!(
                "{} row {}: {} fields, header has {}",
                path.display(),
                i + 1,
                row.len(),
                header.len()
            );
        }
        rows.push(row);
    }
    Ok((header, rows))
}
