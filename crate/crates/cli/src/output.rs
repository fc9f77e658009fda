//! Artifact writing: CSV with a commented header, and JSON reports.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::CliError;

/// The only environment variable the CLI reads.
pub const OUT_DIR_VAR: &str = "CQSIM_OUT_DIR";

pub struct Sink {
    dir: PathBuf,
    config: Value,
}

impl Sink {
    pub fn new(out: Option<&Path>, resolved: &Resolved) -> Result<Self, CliError> {
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(OUT_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")),
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        let config = serde_json::to_value(resolved).expect("config serializes");
        Ok(Sink { dir, config })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `<name>` with `#` comment lines carrying the version and the
    /// resolved config, then the header row and the data rows.
    pub fn csv(&self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let io = |e: std::io::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
        let mut file = File::create(&path).map_err(io)?;
        writeln!(file, "# cqsim {}", cq_core::VERSION).map_err(io)?;
        writeln!(file, "# config: {}", self.config).map_err(io)?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(row.iter().map(|&x| number(x))).map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
        Ok(path)
    }

    /// Wraps `report` with the version and config, writes `<name>.json` and
    /// returns the document.
    pub fn json(&self, name: &str, report: &impl Serialize) -> Result<Value, CliError> {
        let doc = json!({
            "version": cq_core::VERSION,
            "config": self.config,
            "report": report,
        });
        let path = self.path(&format!("{name}.json"));
        let text = serde_json::to_string_pretty(&doc).expect("report serializes");
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(doc)
    }
}

/// Shortest round-trip form, switching to exponent notation outside
/// `[1e-4, 1e15)`.
pub fn number(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.0, 1.0, -0.5, 1e-17, 3.25e20, 0.1 + 0.2, -1.234_567_890_123e-9] {
            assert_eq!(number(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(number(1e-17), "1e-17");
        assert_eq!(number(0.25), "0.25");
    }
}
