//! Content-addressed, immutable object store.
//!
//! Layout under the store root:
//!
//! ```text
//! objects/<first 2 hex>/<remaining 62 hex>   object bytes, named by hash
//! index                                      cache of kind/length/path
//! lock                                       advisory single-writer lock
//! ```
//!
//! The index is a cache: it is rebuilt from `objects/` whenever it is
//! missing or unreadable. Every read re-hashes the object bytes, so any
//! mutation of a stored object is reported as an integrity violation.
//! There is no deletion API.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::hash::ContentHash;
use crate::model::{self, Episode};

/// Environment variable selecting the store root.
pub const STORE_DIR_ENV: &str = "TRACE_STORE_DIR";

const INDEX_TAG: &str = "store_index";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Episode,
    AuditTrail,
    Plan,
    Pipeline,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::Episode,
        ObjectKind::AuditTrail,
        ObjectKind::Plan,
        ObjectKind::Pipeline,
    ];

    /// Tag carried by the object's canonical encoding.
    pub fn tag(self) -> &'static str {
        match self {
            ObjectKind::Episode => model::EPISODE_TAG,
            ObjectKind::AuditTrail => crate::verify::AUDIT_TRAIL_TAG,
            ObjectKind::Plan => crate::simworld::PLAN_TAG,
            ObjectKind::Pipeline => crate::perception::PIPELINE_TAG,
        }
    }

    pub fn from_tag(tag: &str) -> Option<ObjectKind> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    fn check(self, bytes: &[u8]) -> Result<(), String> {
        let result = match self {
            ObjectKind::Episode => model::decode_canonical_episode(bytes).map(drop).map_err(|e| e.to_string()),
            ObjectKind::AuditTrail => crate::verify::decode_canonical_trail(bytes)
                .map(drop)
                .map_err(|e| e.to_string()),
            ObjectKind::Plan => crate::simworld::decode_canonical_plan(bytes)
                .map(drop)
                .map_err(|e| e.to_string()),
            ObjectKind::Pipeline => crate::perception::decode_canonical_pipeline(bytes)
                .map(drop)
                .map_err(|e| e.to_string()),
        };
        result
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub kind: ObjectKind,
    pub len: u64,
    /// Path relative to the store root.
    pub path: String,
    /// Wall-clock time of the first put, when known.
    pub created: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreIndex {
    pub entries: BTreeMap<ContentHash, IndexEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectStatus {
    Ok,
    Corrupt,
    Missing,
}

impl ObjectStatus {
    pub fn name(self) -> &'static str {
        match self {
            ObjectStatus::Ok => "ok",
            ObjectStatus::Corrupt => "corrupt",
            ObjectStatus::Missing => "missing",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("object {0} not found")]
    NotFound(ContentHash),
    #[error("integrity violation: object {expected} now hashes to {actual}")]
    IntegrityViolation {
        expected: ContentHash,
        actual: ContentHash,
    },
    #[error("malformed {kind:?} object: {reason}")]
    Malformed { kind: ObjectKind, reason: String },
    #[error("store is locked by another writer")]
    Locked,
    #[error("store I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    index: Mutex<StoreIndex>,
}

/// Relative object path for a hash: `objects/ab/cdef…`.
pub fn object_rel_path(h: &ContentHash) -> String {
    let hex = h.to_hex();
    format!("objects/{}/{}", &hex[..2], &hex[2..])
}

impl Store {
    /// Opens (creating if necessary) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        let store = Store {
            root,
            index: Mutex::new(StoreIndex::default()),
        };
        let index = store.load_index()?;
        *store.index.lock().unwrap() = index;
        Ok(store)
    }

    /// Opens the store named by `TRACE_STORE_DIR`.
    pub fn open_from_env() -> Result<Store, StoreError> {
        let dir = std::env::var_os(STORE_DIR_ENV).ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("{STORE_DIR_ENV} is not set"))
        })?;
        Store::open(PathBuf::from(dir))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, h: &ContentHash) -> PathBuf {
        self.root.join(object_rel_path(h))
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index")
    }

    fn load_index(&self) -> Result<StoreIndex, StoreError> {
        match fs::read(self.index_path()) {
            Ok(bytes) => match canon::from_canonical_tagged::<StoreIndex>(INDEX_TAG, &bytes) {
                Ok(index) => Ok(index),
                Err(_) => self.scan_objects(),
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => self.scan_objects(),
            Err(e) => Err(e.into()),
        }
    }

    /// Rebuilds the index from the object files and writes it back.
    pub fn rebuild_index(&self) -> Result<(), StoreError> {
        let _lock = self.lock()?;
        let mut index = self.scan_objects()?;
        let old = self.index.lock().unwrap().clone();
        for (h, entry) in index.entries.iter_mut() {
            if let Some(prev) = old.entries.get(h) {
                entry.created = prev.created.clone();
            }
        }
        self.write_index(&index)?;
        *self.index.lock().unwrap() = index;
        Ok(())
    }

    /// Indexes every object file whose bytes still hash to its name.
    fn scan_objects(&self) -> Result<StoreIndex, StoreError> {
        let mut index = StoreIndex::default();
        for (h, path) in self.object_files()? {
            let bytes = fs::read(&path)?;
            if ContentHash::of(&bytes) != h {
                continue;
            }
            let Some(kind) = canon::object_tag(&bytes)
                .ok()
                .and_then(|t| ObjectKind::from_tag(&t))
            else {
                continue;
            };
            index.entries.insert(
                h,
                IndexEntry {
                    kind,
                    len: bytes.len() as u64,
                    path: object_rel_path(&h),
                    created: None,
                },
            );
        }
        Ok(index)
    }

    /// All files under `objects/` whose path spells a valid hash.
    fn object_files(&self) -> Result<Vec<(ContentHash, PathBuf)>, StoreError> {
        let mut out = Vec::new();
        let objects = self.root.join("objects");
        for fan in fs::read_dir(&objects)? {
            let fan = fan?;
            if !fan.file_type()?.is_dir() {
                continue;
            }
            let prefix = fan.file_name().to_string_lossy().into_owned();
            for obj in fs::read_dir(fan.path())? {
                let obj = obj?;
                let name = format!("{prefix}{}", obj.file_name().to_string_lossy());
                if let Ok(h) = name.parse::<ContentHash>() {
                    out.push((h, obj.path()));
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn write_index(&self, index: &StoreIndex) -> Result<(), StoreError> {
        let bytes = canon::to_canonical_tagged(INDEX_TAG, index)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        write_atomic(&self.index_path(), &bytes)?;
        Ok(())
    }

    fn lock(&self) -> Result<File, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join("lock"))?;
        match file.try_lock() {
            Ok(()) => Ok(file),
            Err(TryLockError::WouldBlock) => Err(StoreError::Locked),
            Err(TryLockError::Error(e)) => Err(e.into()),
        }
    }

    /// Stores `bytes` under their content hash. Re-putting identical bytes is
    /// a no-op returning the same hash.
    pub fn put(&self, bytes: &[u8], kind: ObjectKind) -> Result<ContentHash, StoreError> {
        self.put_with_created(bytes, kind, None)
    }

    pub fn put_with_created(
        &self,
        bytes: &[u8],
        kind: ObjectKind,
        created: Option<String>,
    ) -> Result<ContentHash, StoreError> {
        kind.check(bytes)
            .map_err(|reason| StoreError::Malformed { kind, reason })?;
        let h = ContentHash::of(bytes);
        let _lock = self.lock()?;
        let mut index = self.index.lock().unwrap();
        // Another process may have written since we loaded.
        if let Ok(on_disk) = self.load_index() {
            for (k, v) in on_disk.entries {
                index.entries.entry(k).or_insert(v);
            }
        }
        let path = self.object_path(&h);
        let present = match fs::read(&path) {
            Ok(existing) => ContentHash::of(&existing) == h,
            Err(e) if e.kind() == io::ErrorKind::NotFound => false,
            Err(e) => return Err(e.into()),
        };
        if !present {
            fs::create_dir_all(path.parent().expect("object path has a parent"))?;
            write_atomic(&path, bytes)?;
        }
        if !index.entries.contains_key(&h) || !present {
            let created = index
                .entries
                .get(&h)
                .and_then(|e| e.created.clone())
                .or(created);
            index.entries.insert(
                h,
                IndexEntry {
                    kind,
                    len: bytes.len() as u64,
                    path: object_rel_path(&h),
                    created,
                },
            );
            self.write_index(&index)?;
        }
        Ok(h)
    }

    /// Reads an object, verifying that its bytes still hash to `h`.
    pub fn get(&self, h: &ContentHash) -> Result<Vec<u8>, StoreError> {
        let bytes = match fs::read(self.object_path(h)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(*h)),
            Err(e) => return Err(e.into()),
        };
        let actual = ContentHash::of(&bytes);
        if actual != *h {
            return Err(StoreError::IntegrityViolation {
                expected: *h,
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn contains(&self, h: &ContentHash) -> bool {
        self.object_path(h).exists()
    }

    pub fn entry(&self, h: &ContentHash) -> Option<IndexEntry> {
        self.index.lock().unwrap().entries.get(h).cloned()
    }

    /// Reads and decodes a stored episode; `meta.created` is filled from the
    /// index.
    pub fn get_episode(&self, h: &ContentHash) -> Result<Episode, StoreError> {
        let bytes = self.get(h)?;
        let mut e = model::decode_canonical_episode(&bytes).map_err(|err| StoreError::Malformed {
            kind: ObjectKind::Episode,
            reason: err.to_string(),
        })?;
        e.meta.created = self.entry(h).and_then(|entry| entry.created);
        Ok(e)
    }

    /// Hashes of all indexed objects of `kind`, sorted by hex digest.
    pub fn list(&self, kind: ObjectKind) -> Vec<ContentHash> {
        self.index
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(h, _)| *h)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Status of one object.
    pub fn verify(&self, h: &ContentHash) -> Result<ObjectStatus, StoreError> {
        match self.get(h) {
            Ok(_) => Ok(ObjectStatus::Ok),
            Err(StoreError::NotFound(_)) => Ok(ObjectStatus::Missing),
            Err(StoreError::IntegrityViolation { .. }) => Ok(ObjectStatus::Corrupt),
            Err(e) => Err(e),
        }
    }

    /// Re-hashes every indexed object and every object file on disk.
    pub fn verify_all(&self) -> Result<Vec<(ContentHash, ObjectStatus)>, StoreError> {
        let mut hashes: Vec<ContentHash> =
            self.index.lock().unwrap().entries.keys().copied().collect();
        hashes.extend(self.object_files()?.into_iter().map(|(h, _)| h));
        hashes.sort();
        hashes.dedup();
        hashes
            .into_iter()
            .map(|h| Ok((h, self.verify(&h)?)))
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
