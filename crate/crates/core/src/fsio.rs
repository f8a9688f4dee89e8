//! Small filesystem helpers: canonical JSON documents and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{MllError, Result};

/// Pretty JSON with a trailing newline. Deterministic for values built from
/// `Vec`s and `BTreeMap`s.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| MllError::InvalidValue(format!("cannot serialize: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MllError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MllError::parse(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_canonical_json(value)?.as_bytes())
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MllError::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    {
        let mut file = fs::File::create(&tmp).map_err(|e| MllError::io(&tmp, e))?;
        file.write_all(bytes).map_err(|e| MllError::io(&tmp, e))?;
        file.sync_all().map_err(|e| MllError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MllError::io(path, e))
}

/// A hidden sibling path used for write-then-rename.
pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}
