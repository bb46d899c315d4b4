//! Bounded store-and-forward queue of sealed envelopes on the node.
//!
//! Only ciphertext envelopes are kept; nothing here ever holds plaintext
//! audio. When full, the oldest envelopes are evicted first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One day of minute segments.
pub const DEFAULT_SEGMENTS: usize = 2880;

pub struct Backlog {
    entries: BTreeMap<u64, Vec<u8>>,
    capacity_bytes: usize,
    used_bytes: usize,
    evicted: u64,
    dir: Option<PathBuf>,
}

impl Backlog {
    pub fn in_memory(capacity_bytes: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            capacity_bytes,
            used_bytes: 0,
            evicted: 0,
            dir: None,
        }
    }

    /// Opens a directory-backed backlog, reloading envelopes already there.
    pub fn open(dir: impl AsRef<Path>, capacity_bytes: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut b = Self::in_memory(capacity_bytes);
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(seq) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".env"))
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            let bytes = fs::read(&path)?;
            b.used_bytes += bytes.len();
            b.entries.insert(seq, bytes);
        }
        b.dir = Some(dir);
        b.evict_to_fit(0)?;
        Ok(b)
    }

    fn path_for(&self, seq: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{seq:020}.env")))
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    /// Only meaningful before the first insert.
    pub fn set_capacity(&mut self, capacity_bytes: usize) {
        self.capacity_bytes = capacity_bytes;
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of envelopes dropped to make room since creation.
    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn seqs(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn oldest(&self) -> Option<(u64, &[u8])> {
        self.entries.iter().next().map(|(&s, b)| (s, b.as_slice()))
    }

    pub fn get(&self, seq: u64) -> Option<&[u8]> {
        self.entries.get(&seq).map(Vec::as_slice)
    }

    fn evict_to_fit(&mut self, incoming: usize) -> Result<()> {
        while self.used_bytes + incoming > self.capacity_bytes {
            let Some(&seq) = self.entries.keys().next() else {
                break;
            };
            self.remove(seq)?;
            self.evicted += 1;
        }
        Ok(())
    }

    /// Stores an envelope, evicting the oldest entries as needed. Returns the
    /// evicted seqs.
    pub fn insert(&mut self, seq: u64, envelope: Vec<u8>) -> Result<Vec<u64>> {
        if envelope.len() > self.capacity_bytes {
            return Err(Error::Oversized {
                size: envelope.len(),
                capacity: self.capacity_bytes,
            });
        }
        self.remove(seq)?;
        let before: Vec<u64> = self.seqs();
        self.evict_to_fit(envelope.len())?;
        let evicted = before.into_iter().filter(|s| !self.entries.contains_key(s)).collect();
        if let Some(p) = self.path_for(seq) {
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, &envelope)?;
            fs::rename(&tmp, &p)?;
        }
        self.used_bytes += envelope.len();
        self.entries.insert(seq, envelope);
        Ok(evicted)
    }

    pub fn remove(&mut self, seq: u64) -> Result<bool> {
        let Some(bytes) = self.entries.remove(&seq) else {
            return Ok(false);
        };
        self.used_bytes -= bytes.len();
        if let Some(p) = self.path_for(seq) {
            match fs::remove_file(&p) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(true)
    }

    /// Drops every entry with `seq <= through`.
    pub fn remove_through(&mut self, through: u64) -> Result<usize> {
        let doomed: Vec<u64> = self.entries.range(..=through).map(|(&s, _)| s).collect();
        for &s in &doomed {
            self.remove(s)?;
        }
        Ok(doomed.len())
    }

    pub fn flush(&mut self) -> Result<usize> {
        let n = self.entries.len();
        for s in self.seqs() {
            self.remove(s)?;
        }
        Ok(n)
    }
}
