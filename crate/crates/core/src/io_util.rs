use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CrrnError, Result};

/// Write to a sibling temp file and rename it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CrrnError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| CrrnError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CrrnError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CrrnError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CrrnError::io(path, e))
}
