//! File output helpers shared by every report writer.
//!
//! CSV files use a fixed column order with a header row. JSON reports carry a
//! `schema_version` field. Floats are printed with Rust's shortest
//! round-trip formatting so reruns produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Minimal CSV table with a fixed header.
#[derive(Debug, Clone)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |cells: &[String]| cells.iter().map(|c| escape(c)).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "{}", line(&self.header));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }
}

fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Shortest round-trip decimal for a float; `nan`/`inf` spelled out.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        format!("{v}")
    }
}

/// Directory of finished study cells, one JSON file per cell key, so an
/// interrupted run can pick up where it stopped.
///
/// The store is bound to a fingerprint (normally the effective config). If
/// the fingerprint on disk differs, the old cells are discarded.
#[derive(Debug, Clone)]
pub struct CellStore {
    dir: PathBuf,
}

const FINGERPRINT_FILE: &str = "fingerprint.json";
const MANIFEST_FILE: &str = "manifest.json";
const CELL_SUFFIX: &str = ".cell.json";

impl CellStore {
    pub fn open<F: Serialize>(dir: impl Into<PathBuf>, fingerprint: &F) -> Result<Self> {
        let dir = dir.into();
        let mut text = serde_json::to_string_pretty(fingerprint).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        let fp_path = dir.join(FINGERPRINT_FILE);
        match std::fs::read_to_string(&fp_path) {
            Ok(existing) if existing == text => {}
            Ok(_) => {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_file(&fp_path, text.as_bytes())?;
            }
            Err(_) => write_file(&fp_path, text.as_bytes())?,
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let name: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' })
            .collect();
        self.dir.join(format!("{name}{CELL_SUFFIX}"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let path = self.path_for(key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let record: CellRecord<T> = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.key != key {
            return Err(Error::Format(format!("{} holds cell {:?}, expected {key:?}", path.display(), record.key)));
        }
        Ok(Some(record.value))
    }

    /// Stores a finished cell. The file appears atomically, so a crash
    /// never leaves a half-written cell behind.
    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let path = self.path_for(key);
        let record = CellRecord { key: key.to_string(), value };
        let mut text = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        let tmp = path.with_extension("tmp");
        write_file(&tmp, text.as_bytes())?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Keys of every stored cell, sorted.
    pub fn keys(&self) -> Result<Vec<String>> {
        let cells = &self.dir;
        let mut keys = Vec::new();
        let entries = match std::fs::read_dir(cells) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(keys),
            Err(e) => return Err(Error::io(cells, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(cells, e))?.path();
            if !path.to_str().is_some_and(|p| p.ends_with(CELL_SUFFIX)) {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: CellRecord<serde_json::Value> =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            keys.push(record.key);
        }
        keys.sort();
        Ok(keys)
    }

    /// Writes the sorted list of completed cell keys.
    pub fn write_manifest(&self) -> Result<()> {
        write_json(self.dir.join(MANIFEST_FILE), &self.keys()?)
    }
}

#[derive(Serialize, serde::Deserialize)]
struct CellRecord<T> {
    key: String,
    value: T,
}
