//! Output directory handling and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Output directory of one run. Files are tracked so the manifest can list
/// them; the manifest itself is written last.
pub struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl OutDir {
    pub fn open(dir: &Path, force: bool) -> Result<Self, CliError> {
        if dir.join(MANIFEST).exists() && !force {
            return Err(CliError::config(format!(
                "{} already holds a completed run; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        // a stale manifest must not outlive a rerun that fails midway
        let _ = fs::remove_file(dir.join(MANIFEST));
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable report");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CliError::config(format!("csv: {e}"));
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::config(format!("csv: {e}")))?;
        self.write(name, &bytes)
    }

    /// Writes the manifest; the run counts as complete afterwards.
    pub fn finish(self, subcommand: &str, problem_hash: Option<String>, config: Value) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "subcommand": subcommand,
            "problem_hash": problem_hash,
            "config": config,
            "outputs": self.files,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
    }
}
