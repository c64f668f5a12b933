use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub duration_s: f64,
}

/// One output directory per invocation, plus the digests of everything read.
pub struct RunDir {
    root: PathBuf,
    command: String,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunDir {
    /// Refuses a non-empty directory unless `force`, which clears it first.
    pub fn create(root: &Path, command: &str, force: bool) -> CliResult<Self> {
        if root.exists() {
            let non_empty = fs::read_dir(root)
                .map_err(|e| CliError::io(root, e))?
                .next()
                .is_some();
            if non_empty {
                if !force {
                    return Err(CliError::config(format!(
                        "{} already exists and is not empty; pass --force to overwrite",
                        root.display()
                    )));
                }
                fs::remove_dir_all(root).map_err(|e| CliError::io(root, e))?;
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Reads a file and records the digest of the exact bytes.
    pub fn read(&mut self, path: &Path) -> CliResult<String> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        String::from_utf8(bytes).map_err(|_| CliError::new(crate::error::EXIT_DATA, format!("{} is not UTF-8", path.display())))
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.root.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable output");
        self.write(name, &(text + "\n"))
    }

    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command,
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_s: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
