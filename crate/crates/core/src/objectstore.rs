//! Key-addressed blob storage: task inputs, task outputs, and the done-check.
//!
//! Two backends share one contract: [`MemoryStore`] keeps everything in a
//! sorted map, [`FsStore`] maps key `a/b/c` to `<root>/a/b/c`. Because a
//! filesystem path cannot be both a file and a directory, both backends
//! refuse to store `a` next to `a/b` ([`StoreError::KeyConflict`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid object key `{key}`: {reason}")]
    InvalidKey { key: String, reason: &'static str },
    #[error("no such key `{0}`")]
    NoSuchKey(String),
    #[error("key `{key}` conflicts with existing key `{existing}`")]
    KeyConflict { key: String, existing: String },
    #[error("object store i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub key: String,
    pub size: u64,
}

/// Keys are non-empty, `/`-separated, never start with `/`, and contain no
/// empty, `.` or `..` segments.
pub fn validate_key(key: &str) -> Result<(), StoreError> {
    let invalid = |reason| {
        Err(StoreError::InvalidKey {
            key: key.to_string(),
            reason,
        })
    };
    if key.is_empty() {
        return invalid("empty key");
    }
    if key.starts_with('/') {
        return invalid("leading '/'");
    }
    if key.contains('\0') || key.contains('\\') {
        return invalid("forbidden character");
    }
    for segment in key.split('/') {
        match segment {
            "" => return invalid("empty segment"),
            "." | ".." => return invalid("relative segment"),
            _ => {}
        }
    }
    Ok(())
}

pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &str, blob: &[u8]) -> Result<(), StoreError>;

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError>;

    /// Every key starting with `prefix` (plain string prefix), sorted.
    fn list_prefix(&self, prefix: &str) -> Result<Vec<ObjectEntry>, StoreError>;

    fn count_prefix(&self, prefix: &str) -> Result<usize, StoreError> {
        Ok(self.list_prefix(prefix)?.len())
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    objects: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemoryStore {
    fn put(&self, key: &str, blob: &[u8]) -> Result<(), StoreError> {
        validate_key(key)?;
        let mut objects = self.objects.write().expect("store lock poisoned");
        if !objects.contains_key(key) {
            // Only ancestors and descendants can conflict; both sort near `key`.
            let ancestors = key
                .match_indices('/')
                .map(|(i, _)| &key[..i])
                .find(|a| objects.contains_key(*a));
            if let Some(existing) = ancestors {
                return Err(StoreError::KeyConflict {
                    key: key.to_string(),
                    existing: existing.to_string(),
                });
            }
            let dir = format!("{key}/");
            if let Some(existing) = objects
                .range(dir.clone()..)
                .next()
                .map(|(k, _)| k)
                .filter(|k| k.starts_with(&dir))
            {
                return Err(StoreError::KeyConflict {
                    key: key.to_string(),
                    existing: existing.clone(),
                });
            }
        }
        objects.insert(key.to_string(), blob.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        validate_key(key)?;
        self.objects
            .read()
            .expect("store lock poisoned")
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NoSuchKey(key.to_string()))
    }

    fn list_prefix(&self, prefix: &str) -> Result<Vec<ObjectEntry>, StoreError> {
        let objects = self.objects.read().expect("store lock poisoned");
        Ok(objects
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| ObjectEntry {
                key: k.clone(),
                size: v.len() as u64,
            })
            .collect())
    }
}

/// Filesystem-backed store rooted at a directory.
///
/// Writes go to a staging directory next to the root and are renamed into
/// place, so readers never see a partially written blob.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    staging: PathBuf,
    counter: AtomicU64,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "store".to_string());
        let staging = root
            .parent()
            .map(|p| p.join(format!(".{name}.staging")))
            .unwrap_or_else(|| PathBuf::from(format!(".{name}.staging")));
        fs::create_dir_all(&staging)?;
        Ok(Self {
            root,
            staging,
            counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key_to_path(&self, key: &str) -> Result<PathBuf, StoreError> {
        validate_key(key)?;
        Ok(key.split('/').fold(self.root.clone(), |p, s| p.join(s)))
    }

    /// Inverse of [`FsStore::key_to_path`]; `None` for paths outside the root.
    pub fn path_to_key(&self, path: &Path) -> Option<String> {
        let rel = path.strip_prefix(&self.root).ok()?;
        let segments: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
        let key = segments?.join("/");
        validate_key(&key).ok().map(|_| key)
    }

    fn walk(&self, dir: &Path, out: &mut Vec<ObjectEntry>) -> io::Result<()> {
        let entries = match fs::read_dir(dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let ty = entry.file_type()?;
            let path = entry.path();
            if ty.is_dir() {
                self.walk(&path, out)?;
            } else if ty.is_file() {
                if let Some(key) = self.path_to_key(&path) {
                    out.push(ObjectEntry {
                        key,
                        size: entry.metadata()?.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl ObjectStore for FsStore {
    fn put(&self, key: &str, blob: &[u8]) -> Result<(), StoreError> {
        let path = self.key_to_path(key)?;
        // A file in the way of a directory, or a directory in the way of a file.
        let mut probe = self.root.clone();
        let segments: Vec<&str> = key.split('/').collect();
        for (i, seg) in segments.iter().enumerate() {
            probe.push(seg);
            let last = i + 1 == segments.len();
            match fs::metadata(&probe) {
                Ok(meta) if !last && meta.is_file() => {
                    return Err(StoreError::KeyConflict {
                        key: key.to_string(),
                        existing: segments[..=i].join("/"),
                    })
                }
                Ok(meta) if last && meta.is_dir() => {
                    let mut below = Vec::new();
                    self.walk(&probe, &mut below)?;
                    below.sort_by(|a, b| a.key.cmp(&b.key));
                    return Err(StoreError::KeyConflict {
                        key: key.to_string(),
                        existing: below
                            .first()
                            .map(|e| e.key.clone())
                            .unwrap_or_else(|| format!("{key}/")),
                    });
                }
                _ => {}
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.staging.join(format!(
            "{}-{:?}-{n}",
            std::process::id(),
            std::thread::current().id()
        ));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(blob)?;
        file.sync_data()?;
        drop(file);
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.key_to_path(key)?;
        match fs::read(&path) {
            Ok(data) => Ok(data),
            Err(e)
                if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::NotADirectory)
                    || path.is_dir() =>
            {
                Err(StoreError::NoSuchKey(key.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn list_prefix(&self, prefix: &str) -> Result<Vec<ObjectEntry>, StoreError> {
        // Only the directory named by the prefix's complete segments can hold matches.
        let start = match prefix.rfind('/') {
            Some(i) if validate_key(&prefix[..i]).is_ok() => self.root.join(&prefix[..i]),
            Some(_) => return Ok(Vec::new()),
            None => self.root.clone(),
        };
        if !start.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        self.walk(&start, &mut out)?;
        out.retain(|e| e.key.starts_with(prefix));
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }
}

impl<S: ObjectStore + ?Sized> ObjectStore for std::sync::Arc<S> {
    fn put(&self, key: &str, blob: &[u8]) -> Result<(), StoreError> {
        (**self).put(key, blob)
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        (**self).get(key)
    }

    fn list_prefix(&self, prefix: &str) -> Result<Vec<ObjectEntry>, StoreError> {
        (**self).list_prefix(prefix)
    }

    fn count_prefix(&self, prefix: &str) -> Result<usize, StoreError> {
        (**self).count_prefix(prefix)
    }
}
