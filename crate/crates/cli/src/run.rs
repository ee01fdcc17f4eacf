//! Run directories and their manifests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory for outputs; as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileEntry>,
    pub code_version: String,
    pub started: String,
    pub finished: Option<String>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        total += k as u64;
        h.update(&buf[..k]);
    }
    Ok((hex::encode(h.finalize()), total))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// An open run directory. The manifest goes to disk on creation and is
/// rewritten with the output list by [`RunDir::finish`], or on drop when a
/// command bails out early.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    closed: bool,
}

impl RunDir {
    /// Refuses to reuse a non-empty directory so earlier runs stay intact.
    pub fn create(
        root: &Path,
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: &[PathBuf],
    ) -> Result<Self, CliError> {
        if root.exists() && fs::read_dir(root).map_err(|e| io_err(root, e))?.next().is_some() {
            return Err(CliError::Usage(format!(
                "output directory {} already exists and is not empty",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| io_err(root, e))?;
        let inputs = inputs
            .iter()
            .map(|p| {
                let (sha256, bytes) = sha256_file(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Ok(FileEntry {
                    path: p.display().to_string(),
                    sha256,
                    bytes,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let run_id = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let run = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                run_id,
                command: command.to_string(),
                args,
                config,
                seeds,
                inputs,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                started: now(),
                finished: None,
                outputs: Vec::new(),
            },
            closed: false,
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `rel`, with parent directories created.
    pub fn file(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, contents: &str) -> Result<(), CliError> {
        let p = self.file(rel)?;
        fs::write(&p, contents).map_err(|e| io_err(&p, e))
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let p = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
    }

    /// Hashes every file under the run directory and closes the manifest.
    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.close()
    }

    fn close(&mut self) -> Result<RunManifest, CliError> {
        self.closed = true;
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files).map_err(|e| io_err(&self.root, e))?;
        files.retain(|f| f != MANIFEST);
        files.sort();
        self.manifest.outputs = files
            .into_iter()
            .map(|rel| {
                let p = self.root.join(&rel);
                let (sha256, bytes) = sha256_file(&p).map_err(|e| io_err(&p, e))?;
                Ok(FileEntry {
                    path: rel,
                    sha256,
                    bytes,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        self.manifest.finished = Some(now());
        self.write_manifest()?;
        Ok(self.manifest.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.close();
        }
    }
}

/// Relative paths with `/` separators.
fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}
