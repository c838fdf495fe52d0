//! Report envelope and output directory layout.
//!
//! ```text
//! <out>/report.json     machine-readable result
//! <out>/tables.txt      human-readable tables
//! <out>/curves/*.csv    plot data
//! <out>/figures/*.svg   optional renderings
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use abcd_core::curves::{to_svg, CurveSeries};
use abcd_core::Result;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "abcd";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: Value,
    pub warnings: Vec<String>,
    pub result: Value,
}

impl Report {
    pub fn new(command: &str, config: Value, seed: u64, warnings: Vec<String>, result: Value) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            seed,
            config,
            warnings,
            result,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Output directory for one command.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_report(&self, report: &Report) -> Result<()> {
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        fs::write(self.path("report.json"), text)?;
        Ok(())
    }

    pub fn write_tables(&self, text: &str) -> Result<()> {
        fs::write(self.path("tables.txt"), text)?;
        Ok(())
    }

    /// Writes `curves/<name>.csv` and, if asked, `figures/<name>.svg`.
    pub fn write_curve(&self, name: &str, series: &CurveSeries, svg: bool) -> Result<String> {
        let curves = self.path("curves");
        fs::create_dir_all(&curves)?;
        let rel = format!("curves/{name}.csv");
        series.write_csv(fs::File::create(self.path(&rel))?)?;
        if svg {
            let figures = self.path("figures");
            fs::create_dir_all(&figures)?;
            fs::write(figures.join(format!("{name}.svg")), to_svg(series, name))?;
        }
        Ok(rel)
    }
}
