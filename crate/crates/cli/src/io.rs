//! File access for the pipelines. Every output goes through
//! [`write_atomic`], so a failed run never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fsod_core::detcore::{emit_records, load_coco, load_results, DatasetSplit, Detection, ResultRecord};
use fsod_core::embed::{read_store, sidecar_path, write_store, EmbeddingStore};

use crate::error::{CliError, CliResult};

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Write to a temporary file next to `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let io_err = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_split(path: &Path) -> CliResult<DatasetSplit<f64>> {
    load_coco(&read_bytes(path)?).map_err(|e| CliError::from_core(path, e))
}

pub fn load_records(path: &Path) -> CliResult<Vec<ResultRecord<f64>>> {
    load_results(&read_bytes(path)?).map_err(|e| CliError::from_core(path, e))
}

pub fn load_detections(path: &Path) -> CliResult<Vec<Detection<f64>>> {
    Ok(load_records(path)?.into_iter().map(|r| r.detection).collect())
}

pub fn write_detections(path: &Path, dets: &[Detection<f64>]) -> CliResult<()> {
    let records: Vec<ResultRecord<f64>> = dets
        .iter()
        .map(|&detection| ResultRecord { id: None, detection, phrase: None })
        .collect();
    write_records(path, &records)
}

pub fn write_records(path: &Path, records: &[ResultRecord<f64>]) -> CliResult<()> {
    let bytes = emit_records(records).map_err(|e| CliError::from_core(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_store(path: &Path) -> CliResult<EmbeddingStore<f64>> {
    read_store(path).map_err(|e| CliError::from_core(path, e))
}

/// Write a store and its sidecar; both land atomically.
pub fn save_store(path: &Path, store: &EmbeddingStore<f64>) -> CliResult<()> {
    // Stage through a scratch directory, then rename both files into place.
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let scratch = tempfile::tempdir_in(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let name = path.file_name().ok_or_else(|| CliError::Config(format!("not a file path: {}", path.display())))?;
    let staged = scratch.path().join(name);
    write_store(store, &staged).map_err(|e| CliError::from_core(path, e))?;
    let io_err = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    fs::rename(sidecar_path(&staged), sidecar_path(path)).map_err(io_err)?;
    fs::rename(&staged, path).map_err(io_err)?;
    Ok(())
}
