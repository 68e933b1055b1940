//! Subprocess adapters for optional external models.
//!
//! Each adapter exchanges files through a scratch directory: the program is
//! invoked as `program [args..] <input files..> <output file>` and must exit 0.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};

pub(crate) fn run(backend: &str, program: &str, args: &[String], files: &[&Path]) -> Result<()> {
    let output = Command::new(program)
        .args(args)
        .args(files)
        .output()
        .map_err(|e| Error::backend(backend, format!("cannot launch `{program}`: {e}")))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(Error::backend(backend, format!("`{program}` exited with {}: {}", output.status, stderr.trim())));
    }
    Ok(())
}

pub(crate) fn scratch_dir(backend: &str) -> Result<tempfile::TempDir> {
    tempfile::Builder::new()
        .prefix("iceg-")
        .tempdir()
        .map_err(|e| Error::backend(backend, format!("cannot create scratch directory: {e}")))
}
