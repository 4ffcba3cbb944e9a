use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    request_digest, ChatBackend, ChatExchange, ChatRequest, FailingBackend, GatewayError, Origin,
    Usage,
};

/// One line of the append-only replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub digest: String,
    pub request: ChatRequest,
    pub response: String,
    pub usage: Usage,
}

/// Digest-keyed store of recorded exchanges. Reads are concurrent; appends
/// are serialized through one writer.
#[derive(Debug)]
pub struct ReplayStore {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, ReplayRecord>>,
    writer: Mutex<Option<File>>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::default(),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and opens it for appending. When a digest
    /// occurs on several lines the first one wins.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let store_err = |message: String| GatewayError::Store {
            path: path.display().to_string(),
            message,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| store_err(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ReplayRecord = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("line {}: {e}", n + 1)))?;
                entries.entry(rec.digest.clone()).or_insert(rec);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<ReplayRecord> {
        self.entries.read().unwrap().get(digest).cloned()
    }

    /// Stores a record unless its digest is already present. Returns whether
    /// it was added.
    pub fn insert(&self, record: ReplayRecord) -> Result<bool, GatewayError> {
        let mut writer = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(&record.digest) {
            return Ok(false);
        }
        if let Some(path) = &self.path {
            let store_err = |e: std::io::Error| GatewayError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            if writer.is_none() {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(store_err)?;
                *writer = Some(f);
            }
            let line = serde_json::to_string(&record).expect("record serializes");
            let f = writer.as_mut().unwrap();
            writeln!(f, "{line}").map_err(store_err)?;
            f.flush().map_err(store_err)?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(record.digest.clone(), record);
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Answer only from the store; a miss is an error.
    Strict,
    /// Answer from the store when possible, otherwise call through and record.
    Record,
}

pub struct ReplayBackend {
    store: Arc<ReplayStore>,
    mode: ReplayMode,
    inner: Arc<dyn ChatBackend>,
}

impl ReplayBackend {
    pub fn new(store: Arc<ReplayStore>, mode: ReplayMode, inner: Arc<dyn ChatBackend>) -> Self {
        Self { store, mode, inner }
    }

    /// Strict replay with no upstream at all.
    pub fn strict(store: Arc<ReplayStore>) -> Self {
        Self::new(
            store,
            ReplayMode::Strict,
            Arc::new(FailingBackend::default()),
        )
    }

    pub fn recording(store: Arc<ReplayStore>, inner: Arc<dyn ChatBackend>) -> Self {
        Self::new(store, ReplayMode::Record, inner)
    }

    pub fn store(&self) -> &Arc<ReplayStore> {
        &self.store
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        let digest = request_digest(request);
        if let Some(rec) = self.store.get(&digest) {
            return Ok(ChatExchange {
                request: request.clone(),
                response_text: rec.response,
                usage: rec.usage,
                origin: Origin::Replay,
            });
        }
        match self.mode {
            ReplayMode::Strict => Err(GatewayError::ReplayMiss { digest }),
            ReplayMode::Record => {
                let ex = self.inner.complete(request)?;
                self.store.insert(ReplayRecord {
                    digest,
                    request: request.clone(),
                    response: ex.response_text.clone(),
                    usage: ex.usage,
                })?;
                Ok(ex)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnBackend, ScriptedBackend};

    #[test]
    fn strict_miss_names_digest() {
        let b = ReplayBackend::strict(Arc::new(ReplayStore::in_memory()));
        let r = ChatRequest::user("m", "x");
        match b.complete(&r) {
            Err(GatewayError::ReplayMiss { digest }) => assert_eq!(digest, request_digest(&r)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_then_replay_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let requests: Vec<_> = (0..4)
            .map(|i| {
                ChatRequest::user("m", format!("prompt {}", i % 2)).with_sample_tag(i.to_string())
            })
            .collect();
        let recorded: Vec<_> = {
            let upstream = Arc::new(ScriptedBackend::new(["r0", "r1", "r2", "r3"]));
            let b = ReplayBackend::recording(
                Arc::new(ReplayStore::open(&path).unwrap()),
                upstream.clone(),
            );
            let out: Vec<_> = requests.iter().map(|r| b.complete(r).unwrap()).collect();
            // second pass is served from the store
            for r in &requests {
                b.complete(r).unwrap();
            }
            assert_eq!(upstream.calls(), 4);
            out
        };
        let store = Arc::new(ReplayStore::open(&path).unwrap());
        assert_eq!(store.len(), 4);
        let strict = ReplayBackend::strict(store);
        for (r, rec) in requests.iter().zip(&recorded) {
            let a = strict.complete(r).unwrap();
            let b = strict.complete(r).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.response_text, rec.response_text);
            assert_eq!(a.usage, rec.usage);
            assert_eq!(a.origin, Origin::Replay);
        }
    }

    #[test]
    fn strict_never_calls_upstream() {
        let upstream = Arc::new(FailingBackend::default());
        let store = Arc::new(ReplayStore::in_memory());
        let rec = ReplayBackend::recording(
            store.clone(),
            Arc::new(FnBackend::new(|_: &ChatRequest| "ok".to_string())),
        );
        let r = ChatRequest::user("m", "x");
        rec.complete(&r).unwrap();
        let strict = ReplayBackend::new(store, ReplayMode::Strict, upstream.clone());
        strict.complete(&r).unwrap();
        assert!(strict.complete(&ChatRequest::user("m", "other")).is_err());
        assert_eq!(upstream.attempts(), 0);
    }
}
