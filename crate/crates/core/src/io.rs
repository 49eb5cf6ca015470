//! Atomic file output shared by every writer in the crate.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use tempfile::NamedTempFile;

/// Runs `fill` against a temporary file next to `path` and renames it into
/// place on success. On any error the temporary is removed and `path` is left
/// untouched.
pub fn write_atomic<T, E, F>(path: &Path, fill: F) -> Result<T, E>
where
    E: From<io::Error>,
    F: FnOnce(&mut File) -> Result<T, E>,
{
    let tmp = stage(path, fill)?;
    tmp.0.persist(path).map_err(|e| E::from(e.error))?;
    Ok(tmp.1)
}

/// A written but not yet committed file. Dropping it discards the data.
pub struct Staged<T>(NamedTempFile, T);

impl<T> Staged<T> {
    pub fn commit(self, path: &Path) -> io::Result<T> {
        self.0.persist(path).map_err(|e| e.error)?;
        Ok(self.1)
    }
}

/// First half of [`write_atomic`], for callers that must stage several files
/// before committing any of them.
pub fn stage<T, E, F>(path: &Path, fill: F) -> Result<Staged<T>, E>
where
    E: From<io::Error>,
    F: FnOnce(&mut File) -> Result<T, E>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    let value = fill(tmp.as_file_mut())?;
    tmp.as_file_mut().flush()?;
    tmp.as_file().sync_all()?;
    Ok(Staged(tmp, value))
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic(path, |f| f.write_all(bytes))
}
