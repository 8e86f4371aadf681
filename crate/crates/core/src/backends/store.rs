//! Append-only JSON-lines store of backend exchanges, and replay from it.
//!
//! Entries are keyed by the config hash plus the request itself, so a log
//! can hold several runs and replay only answers the matching one.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotateRequest, AnnotateResponse, Backend, BackendError, GenerateRequest, GenerateResponse};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreEntry {
    Generate {
        config_hash: String,
        request: GenerateRequest,
        response: GenerateResponse,
    },
    Annotate {
        config_hash: String,
        request: AnnotateRequest,
        response: AnnotateResponse,
    },
}

type GenerateKey = (String, usize, u64);
type AnnotateKey = (String, String);

fn generate_key(r: &GenerateRequest) -> GenerateKey {
    (r.prompt.clone(), r.count, r.seed)
}

fn annotate_key(r: &AnnotateRequest) -> AnnotateKey {
    (r.image_id.clone(), r.question.clone())
}

/// Wraps a backend, memoizes its answers and appends every new exchange to
/// the store file.
pub struct Recorder<B> {
    inner: B,
    config_hash: String,
    writer: BufWriter<File>,
    path: PathBuf,
    generated: HashMap<GenerateKey, GenerateResponse>,
    annotated: HashMap<AnnotateKey, AnnotateResponse>,
}

impl<B: Backend> Recorder<B> {
    pub fn open(inner: B, path: impl AsRef<Path>, config_hash: impl Into<String>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner,
            config_hash: config_hash.into(),
            writer: BufWriter::new(file),
            path,
            generated: HashMap::new(),
            annotated: HashMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }

    fn append(&mut self, entry: &StoreEntry) -> Result<(), BackendError> {
        let line = serde_json::to_string(entry).expect("store entries serialize");
        writeln!(self.writer, "{line}").map_err(|e| BackendError::Transport(format!("annotation store write failed: {e}")))
    }
}

impl<B> Drop for Recorder<B> {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        let key = generate_key(request);
        if let Some(hit) = self.generated.get(&key) {
            return Ok(hit.clone());
        }
        let response = self.inner.generate(request)?;
        self.append(&StoreEntry::Generate {
            config_hash: self.config_hash.clone(),
            request: request.clone(),
            response: response.clone(),
        })?;
        self.generated.insert(key, response.clone());
        Ok(response)
    }

    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError> {
        let key = annotate_key(request);
        if let Some(hit) = self.annotated.get(&key) {
            return Ok(hit.clone());
        }
        let response = self.inner.annotate(request)?;
        self.append(&StoreEntry::Annotate {
            config_hash: self.config_hash.clone(),
            request: request.clone(),
            response: response.clone(),
        })?;
        self.annotated.insert(key, response.clone());
        Ok(response)
    }
}

/// Answers requests from stored exchanges only; never calls a model.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    generated: HashMap<GenerateKey, GenerateResponse>,
    annotated: HashMap<AnnotateKey, AnnotateResponse>,
}

impl ReplayBackend {
    /// Load entries recorded under `config_hash` from one or more store files.
    pub fn load<P: AsRef<Path>>(paths: &[P], config_hash: &str) -> std::io::Result<Self> {
        let mut replay = Self::default();
        for path in paths {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: StoreEntry = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.as_ref().display(), n + 1),
                    )
                })?;
                replay.insert(entry, config_hash);
            }
        }
        Ok(replay)
    }

    pub fn insert(&mut self, entry: StoreEntry, config_hash: &str) {
        match entry {
            StoreEntry::Generate { config_hash: h, request, response } if h == config_hash => {
                self.generated.insert(generate_key(&request), response);
            }
            StoreEntry::Annotate { config_hash: h, request, response } if h == config_hash => {
                self.annotated.insert(annotate_key(&request), response);
            }
            _ => {}
        }
    }

    pub fn len(&self) -> usize {
        self.generated.len() + self.annotated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.generated.get(&generate_key(request)).cloned().ok_or_else(|| {
            BackendError::ReplayMiss(format!(
                "generate `{}` (count {}, seed {})",
                request.prompt, request.count, request.seed
            ))
        })
    }

    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError> {
        self.annotated
            .get(&annotate_key(request))
            .cloned()
            .ok_or_else(|| BackendError::ReplayMiss(format!("annotate `{}` / `{}`", request.image_id, request.question)))
    }
}
