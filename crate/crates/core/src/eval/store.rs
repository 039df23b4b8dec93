use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::EvalError;

/// Append-only log of JSON objects, one per line.
#[derive(Debug)]
pub struct JsonlStore<T> {
    path: PathBuf,
    writer: Mutex<()>,
    _record: PhantomData<fn() -> T>,
}

impl<T: Serialize + DeserializeOwned> JsonlStore<T> {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            writer: Mutex::new(()),
            _record: PhantomData,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &T) -> Result<(), EvalError> {
        self.append_all(std::slice::from_ref(record))
    }

    pub fn append_all(&self, records: &[T]) -> Result<(), EvalError> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).map_err(|e| EvalError::Store(e.to_string()))?);
            buf.push('\n');
        }
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| EvalError::Store(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| EvalError::Store(e.to_string()))?;
        file.write_all(buf.as_bytes()).map_err(|e| EvalError::Store(e.to_string()))
    }

    /// All records in append order; a missing file is an empty log.
    pub fn load(&self) -> Result<Vec<T>, EvalError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(EvalError::Store(e.to_string())),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| EvalError::Store(format!("{}:{}: {e}", self.path.display(), i + 1)))
            })
            .collect()
    }
}
