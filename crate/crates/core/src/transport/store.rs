use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

/// Name of a stored artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlobKey {
    Global { round: u64 },
    Client { round: u64, client: u32 },
    ServerCheckpoint { round: u64 },
}

impl BlobKey {
    pub fn round(&self) -> u64 {
        match *self {
            BlobKey::Global { round } | BlobKey::Client { round, .. } | BlobKey::ServerCheckpoint { round } => round,
        }
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlobKey::Global { round } => write!(f, "round-{round}/global"),
            BlobKey::Client { round, client } => write!(f, "round-{round}/client-{client}"),
            BlobKey::ServerCheckpoint { round } => write!(f, "ckpt/server-{round}"),
        }
    }
}

fn parse_num<T: FromStr>(s: &str) -> Option<T> {
    // Reject "+3" and leading zeros so that parse(display(k)) is the only spelling.
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

impl FromStr for BlobKey {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, StoreError> {
        let bad = || StoreError::InvalidKey(s.to_string());
        let (prefix, name) = s.split_once('/').ok_or_else(bad)?;
        if prefix == "ckpt" {
            let round = name.strip_prefix("server-").and_then(parse_num).ok_or_else(bad)?;
            return Ok(BlobKey::ServerCheckpoint { round });
        }
        let round = prefix.strip_prefix("round-").and_then(parse_num).ok_or_else(bad)?;
        if name == "global" {
            return Ok(BlobKey::Global { round });
        }
        let client = name.strip_prefix("client-").and_then(parse_num).ok_or_else(bad)?;
        Ok(BlobKey::Client { round, client })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub key: BlobKey,
    pub bytes: u64,
    pub crc32: u32,
}

impl Receipt {
    fn for_bytes(key: BlobKey, bytes: &[u8]) -> Self {
        Receipt { key, bytes: bytes.len() as u64, crc32: crc32fast::hash(bytes) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    NotFound(BlobKey),
    #[error("blob {0} already exists")]
    Conflict(BlobKey),
    #[error("invalid blob key {0:?}")]
    InvalidKey(String),
    #[error("blob store i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Write-once key/value storage for model artifacts.
pub trait BlobStore: Send + Sync {
    fn put(&self, key: BlobKey, bytes: &[u8]) -> Result<Receipt, StoreError>;
    fn get(&self, key: BlobKey) -> Result<Vec<u8>, StoreError>;
    /// Keys whose string form starts with `prefix`, in lexicographic order.
    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError>;

    fn contains(&self, key: BlobKey) -> Result<bool, StoreError> {
        match self.get(key) {
            Ok(_) => Ok(true),
            Err(StoreError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    blobs: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlobStore for MemoryStore {
    fn put(&self, key: BlobKey, bytes: &[u8]) -> Result<Receipt, StoreError> {
        let mut map = self.blobs.write().unwrap_or_else(|e| e.into_inner());
        let name = key.to_string();
        if map.contains_key(&name) {
            return Err(StoreError::Conflict(key));
        }
        map.insert(name, bytes.to_vec());
        Ok(Receipt::for_bytes(key, bytes))
    }

    fn get(&self, key: BlobKey) -> Result<Vec<u8>, StoreError> {
        let map = self.blobs.read().unwrap_or_else(|e| e.into_inner());
        map.get(&key.to_string()).cloned().ok_or(StoreError::NotFound(key))
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let map = self.blobs.read().unwrap_or_else(|e| e.into_inner());
        Ok(map.range(prefix.to_string()..).map(|(k, _)| k).take_while(|k| k.starts_with(prefix)).cloned().collect())
    }
}

/// Directory-per-prefix layout under `root`: key "a/b" lives at `root/a/b`.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| StoreError::Io { path: root.clone(), source })?;
        Ok(FsStore { root, tmp_counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: BlobKey) -> PathBuf {
        self.root.join(key.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

impl BlobStore for FsStore {
    fn put(&self, key: BlobKey, bytes: &[u8]) -> Result<Receipt, StoreError> {
        let path = self.path_of(key);
        let dir = path.parent().expect("keys have a prefix");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if path.exists() {
            return Err(StoreError::Conflict(key));
        }
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        // hard_link fails if the target exists, so concurrent puts of one key
        // cannot both win.
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(Receipt::for_bytes(key, bytes)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Conflict(key)),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }

    fn get(&self, key: BlobKey) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(key);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key)),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        let top = fs::read_dir(&self.root).map_err(io_err(&self.root))?;
        for dir in top {
            let dir = dir.map_err(io_err(&self.root))?;
            if !dir.file_type().map_err(io_err(&dir.path()))?.is_dir() {
                continue;
            }
            let Some(dir_name) = dir.file_name().to_str().map(str::to_string) else { continue };
            let entries = fs::read_dir(dir.path()).map_err(io_err(&dir.path()))?;
            for entry in entries {
                let entry = entry.map_err(io_err(&dir.path()))?;
                let Some(name) = entry.file_name().to_str().map(str::to_string) else { continue };
                let full = format!("{dir_name}/{name}");
                if full.starts_with(prefix) && full.parse::<BlobKey>().is_ok() {
                    out.push(full);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
