//! Per-stage output directories, run manifests and completion markers.

use std::path::{Path, PathBuf};

use posforge::clients::sha256_hex;
use posforge::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const SUCCESS: &str = "_SUCCESS";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct FileHash {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    stage: &'a str,
    version: &'a str,
    config: &'a Value,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| io(path, e))?))
}

/// An open stage directory `<out>/<name>/`.
pub struct Stage {
    pub name: &'static str,
    pub dir: PathBuf,
    inputs: Vec<PathBuf>,
}

pub enum Opened {
    Run(Stage),
    AlreadyDone(PathBuf),
}

impl Stage {
    /// Opens the stage directory. A completed stage is left alone unless
    /// `force` is set, in which case its directory is cleared. An incomplete
    /// directory is kept so resumable stages can continue.
    pub fn open(out: &Path, name: &'static str, force: bool) -> Result<Opened> {
        let dir = out.join(name);
        if force && dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        if dir.join(SUCCESS).exists() {
            return Ok(Opened::AlreadyDone(dir));
        }
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Opened::Run(Stage {
            name,
            dir,
            inputs: Vec::new(),
        }))
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Data(format!("missing input {}", path.display())));
        }
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes the manifest (inputs and outputs by name and SHA-256) and the
    /// completion marker. Outputs are every file in the stage directory.
    pub fn finish(self, config: &Value) -> Result<PathBuf> {
        let hashes = |paths: &[PathBuf], base: Option<&Path>| -> Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    let name = match base.and_then(|b| p.strip_prefix(b).ok()) {
                        Some(rel) => rel.to_string_lossy().replace('\\', "/"),
                        None => p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    };
                    Ok(FileHash {
                        name,
                        sha256: hash_file(p)?,
                    })
                })
                .collect()
        };
        let mut outputs = Vec::new();
        collect_files(&self.dir, &mut outputs).map_err(|e| io(&self.dir, e))?;
        outputs.retain(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            n != MANIFEST && n != SUCCESS
        });
        outputs.sort();
        let manifest = RunManifest {
            stage: self.name,
            version: posforge::VERSION,
            config,
            inputs: hashes(&self.inputs, None)?,
            outputs: hashes(&outputs, Some(&self.dir))?,
        };
        posforge::jsonl::write_json(&self.dir.join(MANIFEST), &manifest)?;
        let marker = self.dir.join(SUCCESS);
        std::fs::write(&marker, b"").map_err(|e| io(&marker, e))?;
        Ok(self.dir)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
