use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use crate::error::{CliError, Context};

/// Every output file is resolved under this root.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    /// Resolves `name` under the root, creating parent directories. Absolute
    /// names and `..` components are refused.
    pub fn path(&self, name: &Path) -> Result<PathBuf, CliError> {
        if name.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(CliError::new("output", format!("`{}` must be a relative path inside --out-dir", name.display())));
        }
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).op("output")?;
        }
        Ok(path)
    }

    pub fn create(&self, name: &Path) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name)?;
        let file = File::create(&path).map_err(|e| CliError::new("output", format!("{}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    pub fn write(&self, name: &Path, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name)?;
        let mut w = self.create(name)?;
        w.write_all(contents).and_then(|_| w.flush()).op("output")?;
        Ok(path)
    }
}
