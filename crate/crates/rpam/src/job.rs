//! Output directories, the job manifest and the provenance record every
//! command leaves behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::files::{sha256_file, sha256_hex, to_json_bytes, FileError};

/// Relative `--out` paths resolve under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "RPAM_OUTPUT_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Error)]
pub enum JobError {
    #[error("no output directory: pass --out or set `output` in the recipe")]
    NoOutput,
    #[error("{0} exists and is not empty (pass --force to overwrite)")]
    Exists(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    File(#[from] FileError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> JobError + '_ {
    move |source| JobError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pick the output directory: an explicit `--out` wins (resolved against
/// `root` when relative), then the recipe's own output.
pub fn resolve_output(
    cli: Option<&Path>,
    recipe: Option<PathBuf>,
    root: Option<&Path>,
) -> Result<PathBuf, JobError> {
    match (cli, recipe) {
        (Some(p), _) if p.is_relative() => Ok(match root {
            Some(r) => r.join(p),
            None => p.to_path_buf(),
        }),
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p),
        (None, None) => Err(JobError::NoOutput),
    }
}

/// The output root from the environment, if set and non-empty.
pub fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Create `dir`, refusing a non-empty one unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), JobError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io(dir))?;
        if entries.next().is_some() && !force {
            return Err(JobError::Exists(dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Collects the inputs read and outputs written by one command, then
/// writes them out with the manifest.
#[derive(Debug)]
pub struct Job {
    command: &'static str,
    dir: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

#[derive(Serialize)]
struct Manifest<'a, P: Serialize> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    recipe: Option<&'a str>,
    output: &'a str,
    seed: Option<u64>,
    parameters: &'a P,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    created: u64,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
}

/// Creation time for provenance records.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Job {
    /// Prepare `dir` (see [`prepare_output`]) and start recording.
    pub fn start(command: &'static str, dir: PathBuf, force: bool) -> Result<Self, JobError> {
        prepare_output(&dir, force)?;
        Ok(Self {
            command,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<(), JobError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Write `bytes` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, JobError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(&path, bytes).map_err(io(&path))?;
        self.outputs.push(FileDigest {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, JobError> {
        self.write(name, &to_json_bytes(value))
    }

    /// Write the manifest and provenance files.
    pub fn finish<P: Serialize>(
        mut self,
        recipe: Option<&Path>,
        seed: Option<u64>,
        parameters: &P,
    ) -> Result<(), JobError> {
        let recipe = recipe.map(|p| p.display().to_string());
        let output = self.dir.display().to_string();
        let manifest = Manifest {
            command: self.command,
            recipe: recipe.as_deref(),
            output: &output,
            seed,
            parameters,
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        let provenance = Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            created: timestamp(),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let path = self.path(PROVENANCE_FILE);
        fs::write(&path, to_json_bytes(&provenance)).map_err(io(&path))
    }
}
