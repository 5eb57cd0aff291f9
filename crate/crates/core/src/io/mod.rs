//! On-disk formats: tensors, JSONL records, embeddings, graphs and checkpoints.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub mod dataset;
pub mod model;
pub mod tensor;

pub use dataset::{Dataset, DetectionRecord, GtAnnotation, GtRecord, ImageData, ImageEntry, Manifest};
pub use model::{PairSource, PredictionRecord};
pub use tensor::{read_tensor, write_tensor, Tensor};

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
