//! Shared file helpers: float formatting for CSV artifacts and metadata
//! echoes written next to every run output.

use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits so the decimal text
/// round-trips to the exact 64-bit value.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses a float field, reporting the file and column on failure.
pub fn parse_f64(path: &Path, field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::io(path, format!("malformed {what}: {field:?}")))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
