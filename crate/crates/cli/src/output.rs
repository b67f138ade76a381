use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    command: &'a str,
    version: &'a str,
    device_sha256: &'a str,
    config: &'a RunConfig,
    outputs: &'a [OutputFile],
}

/// Collects the files written by one command and their digests.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| output_error(&path, e))?;
        self.written.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| output_error(&path, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| output_error(&path, e))?;
        self.record(name)
    }

    /// One header row from the record fields, then one row per record.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, records: &[T], header: &[&str]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| output_error(&path, e))?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        w.write_record(header).map_err(|e| output_error(&path, e))?;
        for r in records {
            w.serialize(r).map_err(|e| output_error(&path, e))?;
        }
        w.flush().map_err(|e| output_error(&path, e))?;
        drop(w);
        self.record(name)
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(BufWriter<File>) -> qmetro::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| output_error(&path, e))?;
        f(BufWriter::new(file)).map_err(|e| output_error(&path, e))?;
        self.record(name)
    }

    pub fn finish(self, command: &str, config: &RunConfig, device_sha256: &str) -> Result<(), CliError> {
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            command,
            version: env!("CARGO_PKG_VERSION"),
            device_sha256,
            config,
            outputs: &self.written,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| output_error(&path, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| output_error(&path, e))
    }
}
