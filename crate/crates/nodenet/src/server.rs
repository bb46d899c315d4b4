//! Ingest server: unwraps envelopes, deduplicates, stores decoded segments
//! and hands queued commands back to nodes on their acks.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rsa::pkcs1::{DecodeRsaPrivateKey, EncodeRsaPrivateKey};
use rsa::RsaPrivateKey;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_segment, payload_info};
use crate::commands::{CommandKind, ControlMessage, NodeCommand};
use crate::envelope::{generate_keypair, open_envelope, public_key_der, EncryptedEnvelope};
use crate::error::{Error, Result};
use crate::segment::{Segment, SplSummary};
use crate::transport::{Request, Response};

const BLOB_FILE: &str = "blobs.bin";
const INDEX_FILE: &str = "index.csv";
const KEY_FILE: &str = "server.key";

/// Index row for one stored segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub node_id: String,
    pub seq: u64,
    pub start_time_ms: i64,
    pub offset: u64,
    pub len: u64,
    pub samples: u64,
    pub sample_rate_hz: u32,
    pub leq_dba: f64,
    pub max_dba: f64,
    pub short: bool,
}

impl Record {
    pub fn duration_ms(&self) -> i64 {
        (self.samples as f64 * 1000.0 / self.sample_rate_hz as f64).round() as i64
    }

    pub fn end_time_ms(&self) -> i64 {
        self.start_time_ms + self.duration_ms()
    }

    pub fn spl_summary(&self) -> SplSummary {
        SplSummary {
            leq_dba: self.leq_dba,
            max_dba: self.max_dba,
        }
    }
}

enum Blobs {
    Memory(Vec<u8>),
    Dir { dir: PathBuf, blob: File, len: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditAction {
    Queued(CommandKind),
    Applied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub at_ms: i64,
    pub node_id: String,
    pub command_id: u64,
    pub action: AuditAction,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ServerStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub quarantined: u64,
}

pub struct Server {
    key: RsaPrivateKey,
    public_der: Vec<u8>,
    blobs: Blobs,
    records: Vec<Record>,
    by_node: HashMap<String, BTreeSet<u64>>,
    locator: HashMap<(String, u64), usize>,
    commands: HashMap<String, VecDeque<NodeCommand>>,
    next_command_id: u64,
    audit: Vec<AuditEntry>,
    stats: ServerStats,
    now_ms: i64,
}

impl Server {
    /// In-memory server whose key pair is derived from `seed`.
    pub fn new(seed: u64) -> Result<Self> {
        let key = generate_keypair(&mut ChaCha20Rng::seed_from_u64(seed))?;
        Self::with_key(key, Blobs::Memory(Vec::new()))
    }

    /// Directory-backed server. An existing key and index are reloaded; a new
    /// key is derived from `seed` otherwise.
    pub fn open(dir: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let key_path = dir.join(KEY_FILE);
        let key = if key_path.exists() {
            RsaPrivateKey::from_pkcs1_der(&fs::read(&key_path)?).map_err(|e| Error::Crypto(e.to_string()))?
        } else {
            let key = generate_keypair(&mut ChaCha20Rng::seed_from_u64(seed))?;
            let der = key.to_pkcs1_der().map_err(|e| Error::Crypto(e.to_string()))?;
            fs::write(&key_path, der.as_bytes())?;
            key
        };
        let blob = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(dir.join(BLOB_FILE))?;
        let len = blob.metadata()?.len();
        let mut server = Self::with_key(key, Blobs::Dir { dir: dir.clone(), blob, len })?;
        let index = dir.join(INDEX_FILE);
        if index.exists() {
            let mut rdr = csv::Reader::from_path(&index)?;
            for row in rdr.deserialize() {
                let rec: Record = row?;
                if rec.offset + rec.len > len {
                    return Err(Error::Malformed(format!(
                        "index entry {}:{} points past the blob store",
                        rec.node_id, rec.seq
                    )));
                }
                server.index(rec);
            }
        }
        Ok(server)
    }

    fn with_key(key: RsaPrivateKey, blobs: Blobs) -> Result<Self> {
        let public_der = public_key_der(&key.to_public_key())?;
        Ok(Self {
            key,
            public_der,
            blobs,
            records: Vec::new(),
            by_node: HashMap::new(),
            locator: HashMap::new(),
            commands: HashMap::new(),
            next_command_id: 1,
            audit: Vec::new(),
            stats: ServerStats::default(),
            now_ms: 0,
        })
    }

    pub fn public_key_der(&self) -> &[u8] {
        &self.public_der
    }

    pub fn private_key(&self) -> &RsaPrivateKey {
        &self.key
    }

    pub fn set_time_ms(&mut self, now_ms: i64) {
        self.now_ms = now_ms;
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn quarantined(&self) -> u64 {
        self.stats.quarantined
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn nodes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.by_node.keys().cloned().collect();
        v.sort();
        v
    }

    fn index(&mut self, rec: Record) {
        self.by_node.entry(rec.node_id.clone()).or_default().insert(rec.seq);
        self.locator.insert((rec.node_id.clone(), rec.seq), self.records.len());
        self.records.push(rec);
    }

    /// Highest seq such that every seq from 0 up to it is held.
    pub fn contiguous(&self, node_id: &str) -> Option<u64> {
        let seqs = self.by_node.get(node_id)?;
        let mut last = None;
        for (expect, &s) in seqs.iter().enumerate() {
            if s != expect as u64 {
                break;
            }
            last = Some(s);
        }
        last
    }

    pub fn has(&self, node_id: &str, seq: u64) -> bool {
        self.locator.contains_key(&(node_id.to_string(), seq))
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Records for a node in seq order.
    pub fn records(&self, node_id: &str) -> Vec<&Record> {
        let Some(seqs) = self.by_node.get(node_id) else {
            return Vec::new();
        };
        seqs.iter()
            .map(|&s| &self.records[self.locator[&(node_id.to_string(), s)]])
            .collect()
    }

    /// Records overlapping `[from_ms, to_ms)`, in time order.
    pub fn records_between(&self, node_id: &str, from_ms: i64, to_ms: i64) -> Vec<&Record> {
        let mut v: Vec<&Record> = self
            .records(node_id)
            .into_iter()
            .filter(|r| r.start_time_ms < to_ms && r.end_time_ms() > from_ms)
            .collect();
        v.sort_by_key(|r| r.start_time_ms);
        v
    }

    pub fn payload(&self, node_id: &str, seq: u64) -> Result<Option<Vec<u8>>> {
        let Some(&i) = self.locator.get(&(node_id.to_string(), seq)) else {
            return Ok(None);
        };
        let rec = &self.records[i];
        let bytes = match &self.blobs {
            Blobs::Memory(b) => b[rec.offset as usize..(rec.offset + rec.len) as usize].to_vec(),
            Blobs::Dir { dir, .. } => {
                let mut f = File::open(dir.join(BLOB_FILE))?;
                f.seek(SeekFrom::Start(rec.offset))?;
                let mut buf = vec![0u8; rec.len as usize];
                f.read_exact(&mut buf)?;
                buf
            }
        };
        Ok(Some(bytes))
    }

    pub fn segment(&self, node_id: &str, seq: u64) -> Result<Option<Segment>> {
        self.payload(node_id, seq)?.map(|p| decode_segment(&p)).transpose()
    }

    pub fn queue_command(&mut self, node_id: &str, kind: CommandKind) -> Result<u64> {
        let cmd = NodeCommand::new(self.next_command_id, kind.clone(), self.now_ms)?;
        self.next_command_id += 1;
        self.audit.push(AuditEntry {
            at_ms: self.now_ms,
            node_id: node_id.to_string(),
            command_id: cmd.id,
            action: AuditAction::Queued(kind),
        });
        let id = cmd.id;
        self.commands.entry(node_id.to_string()).or_default().push_back(cmd);
        Ok(id)
    }

    pub fn pending_commands(&self, node_id: &str) -> usize {
        self.commands.get(node_id).map_or(0, VecDeque::len)
    }

    fn confirm_applied(&mut self, node_id: &str, applied: &[u64]) {
        let Some(q) = self.commands.get_mut(node_id) else {
            return;
        };
        let before: Vec<u64> = q.iter().map(|c| c.id).collect();
        q.retain(|c| !applied.contains(&c.id));
        for id in before.into_iter().filter(|id| applied.contains(id)) {
            self.audit.push(AuditEntry {
                at_ms: self.now_ms,
                node_id: node_id.to_string(),
                command_id: id,
                action: AuditAction::Applied,
            });
        }
    }

    fn persist(&mut self, payload: &[u8], seg_node: &str, seq: u64) -> Result<()> {
        let info = payload_info(payload)?;
        let offset = match &mut self.blobs {
            Blobs::Memory(b) => {
                let off = b.len() as u64;
                b.extend_from_slice(payload);
                off
            }
            Blobs::Dir { blob, len, .. } => {
                let off = *len;
                blob.write_all(payload)?;
                blob.flush()?;
                *len += payload.len() as u64;
                off
            }
        };
        let rec = Record {
            node_id: seg_node.to_string(),
            seq,
            start_time_ms: info.start_time_ms,
            offset,
            len: payload.len() as u64,
            samples: info.samples as u64,
            sample_rate_hz: info.sample_rate_hz,
            leq_dba: info.spl_summary.leq_dba,
            max_dba: info.spl_summary.max_dba,
            short: info.short,
        };
        if let Blobs::Dir { dir, .. } = &self.blobs {
            let path = dir.join(INDEX_FILE);
            let fresh = !path.exists();
            let f = OpenOptions::new().create(true).append(true).open(&path)?;
            let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
            w.serialize(&rec)?;
            w.flush()?;
        }
        self.index(rec);
        Ok(())
    }

    /// Opens, verifies and stores one envelope. Returns whether it was new.
    pub fn ingest(&mut self, envelope: &[u8]) -> Result<bool> {
        let env = EncryptedEnvelope::from_bytes(envelope)?;
        let node_id = env.header.node_id.clone();
        let seq = env.header.seq;
        if self.has(&node_id, seq) {
            self.stats.duplicates += 1;
            return Ok(false);
        }
        let payload = match open_envelope(&env, &self.key) {
            Ok(p) => p,
            Err(e) => {
                self.stats.quarantined += 1;
                return Err(e);
            }
        };
        let checked = payload_info(&payload).and_then(|info| {
            if info.node_id != node_id || info.seq != seq {
                return Err(Error::Malformed("payload identity does not match envelope header".into()));
            }
            decode_segment(&payload).map(|_| ())
        });
        if let Err(e) = checked {
            self.stats.quarantined += 1;
            return Err(e);
        }
        self.persist(&payload, &node_id, seq)?;
        self.stats.accepted += 1;
        Ok(true)
    }

    fn ack(&self, node_id: &str, seq: u64) -> ControlMessage {
        ControlMessage::Ack {
            seq,
            contiguous: self.contiguous(node_id),
            command: self.commands.get(node_id).and_then(|q| q.front().cloned()),
        }
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        let control = match &req.control {
            ControlMessage::Hello { .. } => {
                return Response {
                    control: ControlMessage::Welcome,
                    public_key: Some(self.public_der.clone()),
                }
            }
            ControlMessage::Upload { seq, applied } => match &req.envelope {
                None => ControlMessage::Reject {
                    seq: *seq,
                    reason: "upload without envelope".into(),
                },
                Some(bytes) => match EncryptedEnvelope::from_bytes(bytes) {
                    Err(e) => {
                        self.stats.quarantined += 1;
                        ControlMessage::Reject {
                            seq: *seq,
                            reason: e.to_string(),
                        }
                    }
                    Ok(env) if env.header.seq != *seq => ControlMessage::Reject {
                        seq: *seq,
                        reason: "envelope seq does not match upload".into(),
                    },
                    Ok(env) => {
                        let node_id = env.header.node_id.clone();
                        self.confirm_applied(&node_id, applied);
                        match self.ingest(bytes) {
                            Ok(_) => self.ack(&node_id, *seq),
                            Err(e) => ControlMessage::Reject {
                                seq: *seq,
                                reason: e.to_string(),
                            },
                        }
                    }
                },
            },
            other => ControlMessage::Reject {
                seq: 0,
                reason: format!("unexpected message from node: {other:?}"),
            },
        };
        Response {
            control,
            public_key: None,
        }
    }
}
