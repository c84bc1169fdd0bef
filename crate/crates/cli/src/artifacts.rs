//! Run outputs: a locked staging directory that becomes the output
//! directory only when the run succeeds, CSV tables that reference the
//! manifest, and the manifest itself.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub quantlab: String,
    pub checkpoint_format: u32,
}

/// Everything needed to replay a run. Contains no timestamps or host data,
/// so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub bits: Vec<u8>,
    pub method: Option<String>,
    pub versions: Versions,
    pub files: Vec<FileEntry>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("manifest: {e}")))?;
        m.config.validate()?;
        if m.config.hash() != m.config_sha256 {
            return Err(HarnessError::Config("manifest config does not match its recorded hash".into()));
        }
        Ok(m)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
    name.push(suffix);
    path.with_file_name(name)
}

/// Staging area for one run.
///
/// Holds `<out>.lock` for its lifetime. Files go to `<out>.partial`; on
/// [`OutputDir::commit`] the staging directory replaces `<out>`. Dropping
/// without committing deletes everything written.
#[derive(Debug)]
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    config_sha256: String,
    files: Vec<String>,
    committed: bool,
}

impl OutputDir {
    pub fn create(target: &Path, config_sha256: &str) -> Result<Self, HarnessError> {
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let lock = sibling(target, ".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(HarnessError::Locked(target.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        }
        let staging = sibling(target, ".partial");
        let out = Self {
            target: target.to_path_buf(),
            staging,
            lock,
            config_sha256: config_sha256.to_string(),
            files: Vec::new(),
            committed: false,
        };
        if out.staging.exists() {
            fs::remove_dir_all(&out.staging)?;
        }
        fs::create_dir_all(&out.staging)?;
        Ok(out)
    }

    /// Directory currently receiving files.
    pub fn staging(&self) -> &Path {
        &self.staging
    }

    pub fn path_for(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.staging.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        let path = self.path_for(name);
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Writes `rows` as CSV behind a `# manifest` reference line. Empty tables are refused.
    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<(), HarnessError> {
        let bytes = csv_bytes(&self.config_sha256, rows)?;
        self.write_bytes(name, &bytes)
    }

    pub fn commit(mut self, mut manifest: Manifest) -> Result<PathBuf, HarnessError> {
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        manifest.files = names
            .iter()
            .map(|n| Ok(FileEntry { name: n.clone(), sha256: hex::encode(Sha256::digest(fs::read(self.staging.join(n))?)) }))
            .collect::<Result<_, HarnessError>>()?;
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Internal(e.to_string()))?;
        fs::write(self.staging.join(MANIFEST), json + "\n")?;
        File::open(&self.staging)?.sync_all().ok();
        let old = sibling(&self.target, ".old");
        if self.target.exists() {
            if old.exists() {
                fs::remove_dir_all(&old)?;
            }
            fs::rename(&self.target, &old)?;
        }
        fs::rename(&self.staging, &self.target)?;
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed && self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
        let _ = fs::remove_file(&self.lock);
    }
}

/// CSV text with a leading `# manifest` comment line followed by the header.
pub fn csv_bytes<R: Serialize>(config_sha256: &str, rows: &[R]) -> Result<Vec<u8>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Internal("refusing to write an empty table".into()));
    }
    let mut out = format!("# manifest={MANIFEST} config_sha256={config_sha256}\n").into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    Ok(out)
}
