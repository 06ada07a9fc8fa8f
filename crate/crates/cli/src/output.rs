//! Tables written as CSV with a metadata comment block, or as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Run metadata stamped on every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: String,
    pub scenario_sha256: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(scenario_text: &str, seed: u64) -> Self {
        let digest = Sha256::digest(scenario_text.as_bytes());
        Meta {
            tool: format!("cachesub {}", env!("CARGO_PKG_VERSION")),
            scenario_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(x: Option<T>) -> Self {
        x.map_or(Cell::Empty, Into::into)
    }
}

/// Rounds to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn num_text(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        // -0 and 0 print alike so reruns on other hardware diff clean.
        let y = sig9(x);
        if y == 0.0 {
            "0".into()
        } else {
            format!("{y}")
        }
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Num(x) => num_text(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) if x.is_finite() => json!(sig9(*x)),
            Cell::Num(x) => json!(num_text(*x)),
            Cell::Int(i) => json!(i),
            Cell::Text(s) => json!(s),
            Cell::Empty => Value::Null,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self, meta: &Meta) -> Result<String, Failure> {
        let mut out =
            format!("# tool: {}\n# scenario_sha256: {}\n# seed: {}\n", meta.tool, meta.scenario_sha256, meta.seed);
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns).map_err(Failure::io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::text)).map_err(Failure::io)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::io(e.into_error()))?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    pub fn to_json(&self, meta: &Meta) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let obj: serde_json::Map<String, Value> =
                    self.columns.iter().cloned().zip(r.iter().map(Cell::json)).collect();
                Value::Object(obj)
            })
            .collect();
        json!({ "meta": meta, "rows": rows })
    }
}

/// Output directory plus the settings shared by every file written to it.
pub struct Sink {
    pub dir: PathBuf,
    pub format: Format,
    pub meta: Meta,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, format: Format, meta: Meta) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::io_at(dir, e))?;
        Ok(Sink { dir: dir.to_path_buf(), format, meta, written: Vec::new() })
    }

    pub fn sub(&self, name: &str) -> Result<Sink, Failure> {
        Sink::new(&self.dir.join(name), self.format, self.meta.clone())
    }

    /// Writes `<stem>.csv` or `<stem>.json`.
    pub fn table(&mut self, stem: &str, t: &Table) -> Result<(), Failure> {
        match self.format {
            Format::Csv => {
                let text = t.to_csv(&self.meta)?;
                self.file(&format!("{stem}.csv"), &text)
            }
            Format::Json => self.json(stem, &t.to_json(&self.meta)),
        }
    }

    /// Writes `<stem>.json` with the metadata alongside the payload.
    pub fn document<T: Serialize>(&mut self, stem: &str, body: &T) -> Result<(), Failure> {
        let v = json!({ "meta": self.meta, "data": body });
        self.json(stem, &v)
    }

    fn json(&mut self, stem: &str, v: &Value) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(v).map_err(Failure::io)?;
        text.push('\n');
        self.file(&format!("{stem}.json"), &text)
    }

    pub fn file(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Failure::io_at(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}
