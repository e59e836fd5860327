//! File formats, experiment configuration and synthetic fixtures.

mod bundle;
pub mod checkpoint;
mod config;
pub mod matrix_file;
pub mod names;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use bundle::{read_labels, DatasetBundle};
pub use config::ExperimentConfig;
pub use matrix_file::{decode_matrix, encode_matrix, read_matrix, write_matrix, Dtype};
pub use names::{clean_name, load_language_table};

use crate::error::{Error, Result};

/// Attaches `path` to an I/O error.
pub fn at_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(at_path(path))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(at_path(parent))?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(at_path(&tmp))?;
        f.write_all(bytes).map_err(at_path(&tmp))?;
        f.sync_all().map_err(at_path(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(at_path(path))?;
    Ok(())
}
