use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use interference_core::dataset::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = "interference-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const LOCK: &str = ".interference-lab.lock";

/// A file identified by name (not path, so artifacts do not depend on
/// where the run happened) and content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_hex(bytes),
        }
    }
}

/// Provenance embedded in JSON artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
}

/// Sidecar written after every command: provenance plus output digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub meta: Meta,
    pub outputs: Vec<FileDigest>,
}

/// Removes the lockfile when dropped.
#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// An output directory held exclusively for one run.
#[derive(Debug)]
pub struct OutDir {
    dir: PathBuf,
    _lock: LockGuard,
}

impl OutDir {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let lock = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { dir: dir.to_path_buf(), _lock: LockGuard(lock) }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_error(&lock)(e)),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Write through a temporary file and rename, so readers never see a
    /// partial artifact.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<FileDigest> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(io_error(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_error(&path))?;
        Ok(FileDigest::of(&path, bytes))
    }
}

/// Read an input produced by an earlier command.
pub fn read_input(path: &Path, producer: &'static str, flag: &'static str) -> Result<(Vec<u8>, FileDigest)> {
    match fs::read(path) {
        Ok(bytes) => {
            let d = FileDigest::of(path, &bytes);
            Ok((bytes, d))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(CliError::MissingArtifact { path: path.to_path_buf(), producer, flag })
        }
        Err(e) => Err(io_error(path)(e)),
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(interference_core::Error::from)?;
    v.push(b'\n');
    Ok(v)
}
