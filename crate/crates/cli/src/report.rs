//! CSV / markdown report writer.
//!
//! Every report starts with `#` comment lines: the schema tag, then the run
//! configuration. Readers should skip comment lines (`csv::ReaderBuilder::comment`).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;

pub const SCHEMA: &str = "gptqt-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Markdown,
}

/// One quantized layer.
#[derive(Debug, Clone, Serialize)]
pub struct QuantRow {
    pub layer: String,
    pub method: String,
    pub bits: u32,
    /// Blank for methods without an intermediate grid.
    pub inter_bits: Option<u32>,
    pub range_bits: Option<u32>,
    pub weight_mse: f64,
    pub proxy_loss_diag: f64,
    pub output_rel_error: f64,
    pub plan_secs: f64,
    pub quant_secs: f64,
    pub pack_bytes: usize,
}

impl QuantRow {
    fn numbers(&self) -> [f64; 5] {
        [
            self.weight_mse,
            self.proxy_loss_diag,
            self.output_rel_error,
            self.plan_secs,
            self.quant_secs,
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub path: String,
    pub median_secs: f64,
    pub speedup_vs_dequant: f64,
    pub max_rel_diff: f64,
}

pub trait ReportRow: Serialize {
    fn check_finite(&self) -> Result<()>;
}

impl ReportRow for QuantRow {
    fn check_finite(&self) -> Result<()> {
        if self.numbers().iter().any(|v| !v.is_finite()) {
            bail!("non-finite metric in row {} / {}", self.layer, self.method);
        }
        Ok(())
    }
}

impl ReportRow for BenchRow {
    fn check_finite(&self) -> Result<()> {
        if [self.median_secs, self.speedup_vs_dequant, self.max_rel_diff]
            .iter()
            .any(|v| !v.is_finite())
        {
            bail!(
                "non-finite timing for {}x{} {}",
                self.rows,
                self.cols,
                self.path
            );
        }
        Ok(())
    }
}

pub struct Report<R> {
    pub command: &'static str,
    pub settings: Vec<(String, String)>,
    pub rows: Vec<R>,
    pub footer: Vec<String>,
}

impl<R: ReportRow> Report<R> {
    pub fn new(command: &'static str, settings: Vec<(String, String)>) -> Self {
        Self {
            command,
            settings,
            rows: Vec::new(),
            footer: Vec::new(),
        }
    }

    fn csv_body(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            row.check_finite()?;
            w.serialize(row)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        let body = self.csv_body()?;
        let settings = self
            .settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let mut out = String::new();
        match format {
            Format::Csv => {
                writeln!(out, "# {SCHEMA} command={}", self.command)?;
                writeln!(out, "# {settings}")?;
                out.push_str(&body);
                for line in &self.footer {
                    writeln!(out, "# {line}")?;
                }
            }
            Format::Markdown => {
                writeln!(out, "<!-- {SCHEMA} command={} -->", self.command)?;
                writeln!(out, "<!-- {settings} -->")?;
                writeln!(out)?;
                let mut rd = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .from_reader(body.as_bytes());
                for (i, rec) in rd.records().enumerate() {
                    let rec = rec?;
                    writeln!(out, "| {} |", rec.iter().collect::<Vec<_>>().join(" | "))?;
                    if i == 0 {
                        writeln!(out, "|{}", "---|".repeat(rec.len()))?;
                    }
                }
                if !self.footer.is_empty() {
                    writeln!(out)?;
                    for line in &self.footer {
                        writeln!(out, "- {line}")?;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn emit(&self, format: Format, path: Option<&Path>) -> Result<()> {
        let text = self.render(format)?;
        match path {
            Some(p) => {
                fs::write(p, text).with_context(|| format!("writing report {}", p.display()))?
            }
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}
