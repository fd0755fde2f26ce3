//! Per-target object storage on a local directory.
//!
//! Objects live at `<root>/<bucket>/<objname>`. Writes go to `<root>/.tmp`
//! first and are renamed into place, so readers never see partial objects.
//! Shard members are extracted with a linear scan of the stored TAR.

use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use batchstore_core::model::ObjectRef;
use batchstore_core::tar::{find_member, ReadError};
use bytes::Bytes;
use crossbeam_channel::{Sender, TrySendError};
use thiserror::Error;

const TMP_DIR: &str = ".tmp";
const READAHEAD_QUEUE: usize = 4096;

/// Per-entry failures that a batch can tolerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftReason {
    NotFound,
    BadArchive,
    MemberNotFound,
    InvalidName,
}

impl SoftReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftReason::NotFound => "not_found",
            SoftReason::BadArchive => "bad_archive",
            SoftReason::MemberNotFound => "member_not_found",
            SoftReason::InvalidName => "invalid_name",
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}", .0.as_str())]
    Soft(SoftReason),
    #[error("store io: {0}")]
    Hard(#[from] io::Error),
}

impl StoreError {
    pub fn soft_reason(&self) -> Option<SoftReason> {
        match self {
            StoreError::Soft(r) => Some(*r),
            StoreError::Hard(_) => None,
        }
    }
}

fn is_not_found(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::NotFound | io::ErrorKind::IsADirectory | io::ErrorKind::NotADirectory
    )
}

/// Maps `(bucket, objname)` to a path under `root`, refusing anything that
/// could step outside it.
pub fn object_path(root: &Path, bucket: &str, objname: &str) -> Option<PathBuf> {
    if bucket.is_empty() || bucket.contains('/') || bucket.starts_with('.') {
        return None;
    }
    if bucket.contains('\0') || objname.contains('\0') || objname.is_empty() {
        return None;
    }
    let mut p = root.join(bucket);
    for part in objname.split('/') {
        if part.is_empty() || part == "." || part == ".." {
            return None;
        }
        let mut comps = Path::new(part).components();
        match (comps.next(), comps.next()) {
            (Some(Component::Normal(c)), None) => p.push(c),
            _ => return None,
        }
    }
    Some(p)
}

pub struct TargetStore {
    root: PathBuf,
    fsync: bool,
    readahead_tx: Sender<PathBuf>,
    readahead_workers: usize,
    busy_nanos: Arc<AtomicU64>,
    readahead_done: Arc<AtomicU64>,
}

impl TargetStore {
    pub fn open(root: impl Into<PathBuf>, readahead_workers: usize, fsync: bool) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(TMP_DIR))?;
        let (tx, rx) = crossbeam_channel::bounded::<PathBuf>(READAHEAD_QUEUE);
        let busy_nanos = Arc::new(AtomicU64::new(0));
        let readahead_done = Arc::new(AtomicU64::new(0));
        let workers = readahead_workers.max(1);
        for i in 0..workers {
            let rx = rx.clone();
            let done = readahead_done.clone();
            std::thread::Builder::new()
                .name(format!("readahead-{i}"))
                .spawn(move || {
                    let mut buf = vec![0u8; 1 << 16];
                    while let Ok(path) = rx.recv() {
                        if let Ok(mut f) = File::open(&path) {
                            while matches!(f.read(&mut buf), Ok(n) if n > 0) {}
                        }
                        done.fetch_add(1, Ordering::Relaxed);
                    }
                })?;
        }
        Ok(TargetStore {
            root,
            fsync,
            readahead_tx: tx,
            readahead_workers: workers,
            busy_nanos,
            readahead_done,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn readahead_workers(&self) -> usize {
        self.readahead_workers
    }

    /// Cumulative wall time spent inside local reads, for the disk-busy signal.
    pub fn busy_nanos(&self) -> u64 {
        self.busy_nanos.load(Ordering::Relaxed)
    }

    pub fn readahead_completed(&self) -> u64 {
        self.readahead_done.load(Ordering::Relaxed)
    }

    fn path_of(&self, r: &ObjectRef) -> Result<PathBuf, StoreError> {
        object_path(&self.root, &r.bucket, &r.objname).ok_or(StoreError::Soft(SoftReason::InvalidName))
    }

    /// Writes a whole object; last writer wins.
    pub fn put_object(&self, r: &ObjectRef, content: &[u8]) -> Result<u64, StoreError> {
        if r.archpath.is_some() {
            return Err(StoreError::Soft(SoftReason::InvalidName));
        }
        let dest = self.path_of(r)?;
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = self
            .root
            .join(TMP_DIR)
            .join(format!("{:032x}", rand::random::<u128>()));
        let res = (|| {
            let mut f = File::create(&tmp)?;
            f.write_all(content)?;
            if self.fsync {
                f.sync_data()?;
            }
            fs::rename(&tmp, &dest)
        })();
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            return Err(StoreError::Hard(e));
        }
        Ok(content.len() as u64)
    }

    pub fn delete_object(&self, r: &ObjectRef) -> Result<(), StoreError> {
        let p = self.path_of(r)?;
        match fs::remove_file(p) {
            Ok(()) => Ok(()),
            Err(e) if is_not_found(&e) => Err(StoreError::Soft(SoftReason::NotFound)),
            Err(e) => Err(StoreError::Hard(e)),
        }
    }

    /// Whole object bytes, or the bytes of `archpath` inside a stored shard.
    pub fn read_local(&self, r: &ObjectRef) -> Result<Bytes, StoreError> {
        let started = Instant::now();
        let out = self.read_inner(r);
        self.busy_nanos
            .fetch_add(started.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    fn read_inner(&self, r: &ObjectRef) -> Result<Bytes, StoreError> {
        let p = self.path_of(r)?;
        let open = |p: &Path| {
            File::open(p).map_err(|e| {
                if is_not_found(&e) {
                    StoreError::Soft(SoftReason::NotFound)
                } else {
                    StoreError::Hard(e)
                }
            })
        };
        match &r.archpath {
            None => {
                let mut f = open(&p)?;
                let mut buf = Vec::with_capacity(f.metadata().map(|m| m.len() as usize).unwrap_or(0));
                f.read_to_end(&mut buf).map_err(|e| {
                    if is_not_found(&e) {
                        StoreError::Soft(SoftReason::NotFound)
                    } else {
                        StoreError::Hard(e)
                    }
                })?;
                Ok(Bytes::from(buf))
            }
            Some(member) => {
                let f = open(&p)?;
                match find_member(BufReader::new(f), member) {
                    Ok(Some(data)) => Ok(Bytes::from(data)),
                    Ok(None) => Err(StoreError::Soft(SoftReason::MemberNotFound)),
                    Err(ReadError::Io(e)) if e.kind() != io::ErrorKind::UnexpectedEof => {
                        Err(StoreError::Hard(e))
                    }
                    Err(_) => Err(StoreError::Soft(SoftReason::BadArchive)),
                }
            }
        }
    }

    /// Queues best-effort page-cache warming reads; drops work when the queue
    /// is full or a name is invalid.
    pub fn readahead<'a>(&self, refs: impl IntoIterator<Item = &'a ObjectRef>) {
        for r in refs {
            if let Ok(p) = self.path_of(r) {
                match self.readahead_tx.try_send(p) {
                    Ok(()) | Err(TrySendError::Full(_)) => {}
                    Err(TrySendError::Disconnected(_)) => return,
                }
            }
        }
    }
}
