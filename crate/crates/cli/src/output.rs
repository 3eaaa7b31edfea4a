//! CSV tables and their JSON sidecars.
//!
//! Order-parameter columns are `tau, loss, m_<h>_<f>, r_<h>_<h'>, b_<h>, v`
//! with 1-based indices. Floats use the shortest representation that parses
//! back to the same value, so reruns give byte-identical files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use headlab::OrderState;
use serde::Serialize;

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn state_columns(heads: usize, features: usize, suffix: &str) -> Vec<String> {
    let mut cols = vec![format!("loss{suffix}")];
    for h in 1..=heads {
        for f in 1..=features {
            cols.push(format!("m_{h}_{f}{suffix}"));
        }
    }
    for h in 1..=heads {
        for hp in 1..=heads {
            cols.push(format!("r_{h}_{hp}{suffix}"));
        }
    }
    for h in 1..=heads {
        cols.push(format!("b_{h}{suffix}"));
    }
    cols.push(format!("v{suffix}"));
    cols
}

pub fn state_values(state: &OrderState) -> Vec<String> {
    let mut out = vec![fmt_opt(state.loss)];
    let (h, f) = (state.heads(), state.features());
    for i in 0..h {
        for j in 0..f {
            out.push(fmt_f64(state.m[(i, j)]));
        }
    }
    for i in 0..h {
        for j in 0..h {
            out.push(fmt_f64(state.r[(i, j)]));
        }
    }
    out.extend(state.b.iter().map(|&x| fmt_f64(x)));
    out.push(fmt_f64(state.v));
    out
}

pub fn trajectory_header(heads: usize, features: usize) -> Vec<String> {
    let mut cols = vec!["tau".to_string()];
    cols.extend(state_columns(heads, features, ""));
    cols
}

/// A CSV table held in memory and written in one go.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct Sidecar<'a, C: Serialize> {
    pub experiment: &'a str,
    pub file: String,
    pub kind: Option<String>,
    pub seed: Option<u64>,
    pub seeds: &'a [u64],
    pub threads: usize,
    pub version: &'static str,
    pub wall_time_s: f64,
    pub config: &'a C,
    pub summary: serde_json::Value,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_sidecar<C: Serialize>(csv: &Path, sidecar: &Sidecar<'_, C>) -> Result<()> {
    let path = sidecar_path(csv);
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
