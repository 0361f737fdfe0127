use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use gpevidence::Result;
use serde::Serialize;

use crate::args::Cli;

pub const TOOL: &str = "gpevidence";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reproduction record embedded in every output.
#[derive(Debug, Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a Cli,
}

impl<'a> Provenance<'a> {
    pub fn new(cli: &'a Cli, seed: u64) -> Self {
        Provenance { tool: TOOL, version: VERSION, command: cli.command.name(), seed, config: cli }
    }

    /// Compact single-line JSON for CSV columns.
    pub fn config_json(&self) -> String {
        serde_json::to_string(self.config).unwrap_or_default()
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Provenance<'a>,
    #[serde(flatten)]
    body: &'a T,
}

pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

pub fn write_json<T: Serialize>(path: Option<&Path>, provenance: &Provenance, body: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, &Document { provenance, body })?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes a header and rows; the provenance occupies trailing columns of every row.
pub fn write_csv(
    path: Option<&Path>,
    provenance: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    let mut full: Vec<&str> = header.to_vec();
    full.extend(["tool_version", "seed", "config"]);
    w.write_record(&full)?;
    let config = provenance.config_json();
    for row in rows {
        let mut record = row.clone();
        record.push(format!("{} {}", provenance.tool, provenance.version));
        record.push(provenance.seed.to_string());
        record.push(config.clone());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
