//! Result tables, JSON/CSV rendering and run manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use skewfront::report::fmt_f64;

use crate::config::Config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Rows of a CSV table.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// A float cell.
pub fn cell(x: f64) -> String {
    fmt_f64(x)
}

/// What a subcommand produced.
#[derive(Debug)]
pub struct Report {
    pub json: Value,
    /// Tabular view; when absent, CSV output is a single row built from
    /// the scalar fields of `json`.
    pub table: Option<Table>,
    pub default_format: Format,
    pub seeds: BTreeMap<&'static str, u64>,
    pub env_digest: Option<String>,
    /// Additional files written by the subcommand (e.g. snapshots).
    pub files: Vec<PathBuf>,
    /// Set when a validation check failed (exit code 2).
    pub failure: Option<String>,
}

impl Report {
    pub fn new(json: Value, default_format: Format) -> Self {
        Self {
            json,
            table: None,
            default_format,
            seeds: BTreeMap::new(),
            env_digest: None,
            files: Vec::new(),
            failure: None,
        }
    }

    pub fn with_table(mut self, table: Table) -> Self {
        self.table = Some(table);
        self
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.json).expect("report serializes");
                s.push('\n');
                s
            }
            Format::Csv => {
                let table = self.table.clone().unwrap_or_else(|| scalar_row(&self.json));
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&table.header).expect("in-memory write");
                for row in &table.rows {
                    w.write_record(row).expect("in-memory write");
                }
                String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 csv")
            }
        }
    }
}

/// One-row table of the top-level fields of a JSON object; nested values
/// are written as compact JSON.
fn scalar_row(json: &Value) -> Table {
    let Value::Object(map) = json else {
        let mut t = Table::new(&["value"]);
        t.push(vec![plain(json)]);
        return t;
    };
    let header = map.keys().cloned().collect();
    let row = map.values().map(plain).collect();
    Table {
        header,
        rows: vec![row],
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Number(n) if n.is_f64() => n.as_f64().map(fmt_f64).unwrap_or_else(|| n.to_string()),
        Value::Number(n) => n.to_string(),
        other => other.to_string(),
    }
}

/// Reproduction record written next to every output file.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub subcommand: &'a str,
    pub argv: Vec<String>,
    pub config: &'a Config,
    pub seeds: &'a BTreeMap<&'static str, u64>,
    pub env_digest: Option<&'a str>,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn write_file(path: &Path, text: &str) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())
}

/// `out.csv` → `out.csv.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn scalar_objects_become_one_csv_row() {
        let r = Report::new(json!({"a": 1.5, "b": "inf", "c": [1, 2]}), Format::Json);
        assert_eq!(r.render(Format::Csv), "a,b,c\n1.5,inf,\"[1,2]\"\n");
    }

    #[test]
    fn tables_take_precedence() {
        let mut t = Table::new(&["x", "y"]);
        t.push(vec![cell(0.5), cell(f64::NAN)]);
        let r = Report::new(json!({}), Format::Csv).with_table(t);
        assert_eq!(r.render(Format::Csv), "x,y\n0.5,nan\n");
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path(Path::new("/tmp/a.csv")), PathBuf::from("/tmp/a.csv.manifest.json"));
    }
}
