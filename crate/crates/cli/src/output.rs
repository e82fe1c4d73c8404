//! Output directory handling. Files are written to a temporary file in the
//! same directory and renamed into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use tempfile::NamedTempFile;

use crate::CliError;

pub struct OutputDir {
    dir: PathBuf,
    force: bool,
}

impl OutputDir {
    /// Creates `dir` and checks up front that none of `names` would be
    /// clobbered without `force`, so a long run cannot fail at the end.
    pub fn prepare(dir: &Path, names: &[&str], force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        if !force {
            if let Some(existing) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "{} already exists (pass --force to overwrite)",
                    existing.display()
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
        })
    }

    pub fn write(
        &self,
        name: &str,
        fill: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let target = self.dir.join(name);
        let tmp = NamedTempFile::new_in(&self.dir).context("cannot create temporary output file")?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            fill(&mut w).with_context(|| format!("while writing {}", target.display()))?;
            w.flush().context("flushing output")?;
        }
        let persisted = if self.force {
            tmp.persist(&target).map(drop)
        } else {
            tmp.persist_noclobber(&target).map(drop)
        };
        persisted.with_context(|| format!("cannot move output into place at {}", target.display()))?;
        Ok(target)
    }
}
