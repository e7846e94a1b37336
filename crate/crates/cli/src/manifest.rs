//! Per-run manifest written next to every output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use pursuit_core::kv::KvWriter;

/// File name of the run manifest inside an output directory.
pub const MANIFEST_NAME: &str = "run_manifest.txt";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration: Duration,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let join = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut w = KvWriter::new();
        w.comment("run manifest")
            .put("subcommand", self.subcommand)
            .put("tool_version", env!("CARGO_PKG_VERSION"))
            .put(
                "config",
                self.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            )
            .put("seed", self.seed.map(|s| s.to_string()).unwrap_or_default())
            .put("inputs", join(&self.inputs))
            .put("outputs", join(&self.outputs))
            .put("wall_clock_seconds", format!("{:.3}", self.duration.as_secs_f64()));
        w.finish()
    }

    /// Replaces `dir/run_manifest.txt` in one rename, so readers never see a
    /// partial manifest and the directory never holds two.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let target = dir.join(MANIFEST_NAME);
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
        tmp.write_all(self.to_text().as_bytes())?;
        tmp.persist(&target)
            .with_context(|| format!("cannot write {}", target.display()))?;
        Ok(target)
    }
}
