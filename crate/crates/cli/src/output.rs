use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Flat projection of a report for plotting.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

pub enum Report {
    Stamped { json: Value, table: Table },
    /// A file format such as a Kruskal model, written verbatim.
    Artifact(String),
}

impl Report {
    pub fn new(body: &impl Serialize, table: Table) -> Self {
        Self::Stamped { json: serde_json::to_value(body).expect("reports serialize"), table }
    }
}

pub fn cell(x: f64) -> String {
    x.to_string()
}

pub fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn render(report: Report, format: Format, reproducible: bool) -> Result<String, CliError> {
    let (mut json, table) = match report {
        Report::Stamped { json, table } => (json, table),
        Report::Artifact(_) if format == Format::Csv => {
            return Err(CliError::Usage("this command writes JSON only".into()));
        }
        Report::Artifact(text) => return Ok(text + "\n"),
    };
    match format {
        Format::Json => {
            if !reproducible {
                if let Value::Object(map) = &mut json {
                    let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
                    map.insert("timestamp".into(), Value::String(now));
                }
            }
            let mut text = serde_json::to_string_pretty(&json).expect("values serialize");
            text.push('\n');
            Ok(text)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header).map_err(|e| CliError::Io(e.to_string()))?;
            for row in &table.rows {
                w.write_record(row).map_err(|e| CliError::Io(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
        }
    }
}

pub fn emit(report: Report, format: Format, reproducible: bool, output: Option<&Path>) -> Result<(), CliError> {
    let text = render(report, format, reproducible)?;
    match output {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => std::io::stdout().lock().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}
