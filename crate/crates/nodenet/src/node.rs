//! Simulated sensor node: capture, seal, store and upload on a simulated
//! clock.
//!
//! Each call to [`Node::run_minute`] captures one segment and then spends one
//! segment-length upload window draining the backlog oldest first. Retries
//! after link failures back off exponentially; nothing sleeps, the clock is
//! advanced instead.

use std::collections::{HashSet, VecDeque};
use std::f64::consts::PI;
use std::path::PathBuf;

use acslm_core::conformance::stimulus::coloured_noise;
use acslm_core::meter::{SplMeter, WeightingKind};
use acslm_core::mic::{sine_amplitude_for_spl, PA_PER_UNIT, REFERENCE_SPL_DB};
use acslm_core::SampleBuffer;
use rand::rngs::OsRng;
use rsa::RsaPublicKey;

use crate::backlog::{Backlog, DEFAULT_SEGMENTS};
use crate::codec::{encode_segment, Codec};
use crate::commands::{CommandKind, ControlMessage, NodeCommand};
use crate::envelope::{public_key_from_der, seal_envelope};
use crate::error::{Error, Result};
use crate::segment::{quantize_pcm16, Segment, SplSummary, SEGMENT_S};
use crate::transport::{Request, Transport};

pub const BACKOFF_BASE_MS: i64 = 5_000;
pub const BACKOFF_CAP_MS: i64 = 300_000;
/// Simulated time taken by one successful exchange.
const EXCHANGE_MS: i64 = 100;
const CALIBRATION_S: f64 = 2.0;

/// Delay before the next attempt after `failures` consecutive failures.
pub fn backoff_ms(failures: u32) -> i64 {
    if failures == 0 {
        return 0;
    }
    let shift = (failures - 1).min(16);
    (BACKOFF_BASE_MS << shift).min(BACKOFF_CAP_MS)
}

/// Produces microphone output samples, one segment at a time.
pub trait AudioSource {
    fn sample_rate_hz(&self) -> u32;
    /// May return fewer than `n` samples when the source runs dry.
    fn capture(&mut self, index: u64, n: usize) -> Result<Vec<f64>>;
}

/// Pink noise at a fixed RMS, reseeded per segment so every segment is
/// reproducible on its own.
pub struct PinkNoiseSource {
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub rms: f64,
}

impl AudioSource for PinkNoiseSource {
    fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    fn capture(&mut self, index: u64, n: usize) -> Result<Vec<f64>> {
        Ok(coloured_noise(n, self.seed.wrapping_add(index), self.sample_rate_hz, true, self.rms))
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_id: String,
    pub sample_rate_hz: u32,
    pub codec: Codec,
    pub segment_s: f64,
    pub start_time_ms: i64,
    /// `None` sizes the backlog at two days of envelopes, measured on the
    /// first one sealed.
    pub backlog_capacity: Option<usize>,
    pub storage_dir: Option<PathBuf>,
    pub sensitivity_db_re_1v_pa: f64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            node_id: "node-1".into(),
            sample_rate_hz: 44_100,
            codec: Codec::Lossless,
            segment_s: SEGMENT_S,
            start_time_ms: 0,
            backlog_capacity: None,
            storage_dir: None,
            sensitivity_db_re_1v_pa: -38.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvent {
    pub at_ms: i64,
    pub command_id: u64,
    pub kind: CommandKind,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct NodeStats {
    pub captured: u64,
    pub acked: u64,
    pub rejected: u64,
    pub link_failures: u64,
}

pub type SegmentTap = Box<dyn FnMut(&Segment) + Send>;

pub struct Node {
    cfg: NodeConfig,
    meter: SplMeter,
    gain_db: f64,
    backlog: Backlog,
    capacity_fixed: bool,
    server_key: Option<RsaPublicKey>,
    /// Encoded payloads waiting for the server key. Memory only.
    unsealed: VecDeque<(u64, Vec<u8>)>,
    next_seq: u64,
    clock_ms: i64,
    net_clock_ms: i64,
    next_attempt_ms: i64,
    failures: u32,
    applied: HashSet<u64>,
    unconfirmed: Vec<u64>,
    audit: Vec<NodeEvent>,
    firmware: String,
    reboots: u32,
    stats: NodeStats,
    tap: Option<SegmentTap>,
}

impl Node {
    pub fn new(cfg: NodeConfig) -> Result<Self> {
        let mut meter = SplMeter::new(WeightingKind::A, cfg.sample_rate_hz)?;
        let sens = 10f64.powf(cfg.sensitivity_db_re_1v_pa / 20.0);
        let amp = sine_amplitude_for_spl(REFERENCE_SPL_DB) * PA_PER_UNIT * sens;
        let rate = cfg.sample_rate_hz as f64;
        let n = (CALIBRATION_S * rate) as usize;
        let tone: Vec<f64> = (0..n).map(|i| amp * (2.0 * PI * 1000.0 * i as f64 / rate).sin()).collect();
        meter.calibrate(&SampleBuffer::new(tone, cfg.sample_rate_hz)?, REFERENCE_SPL_DB)?;

        let capacity = cfg.backlog_capacity.unwrap_or(usize::MAX);
        let backlog = match &cfg.storage_dir {
            Some(d) => Backlog::open(d, capacity)?,
            None => Backlog::in_memory(capacity),
        };
        let next_seq = backlog.seqs().last().map_or(0, |s| s + 1);
        Ok(Self {
            capacity_fixed: cfg.backlog_capacity.is_some(),
            meter,
            gain_db: 0.0,
            backlog,
            server_key: None,
            unsealed: VecDeque::new(),
            next_seq,
            clock_ms: cfg.start_time_ms,
            net_clock_ms: cfg.start_time_ms,
            next_attempt_ms: cfg.start_time_ms,
            failures: 0,
            applied: HashSet::new(),
            unconfirmed: Vec::new(),
            audit: Vec::new(),
            firmware: env!("CARGO_PKG_VERSION").to_string(),
            reboots: 0,
            stats: NodeStats::default(),
            tap: None,
            cfg,
        })
    }

    /// Called with every captured segment, before it is encoded.
    pub fn set_tap(&mut self, tap: SegmentTap) {
        self.tap = Some(tap);
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    pub fn meter(&self) -> &SplMeter {
        &self.meter
    }

    pub fn gain_db(&self) -> f64 {
        self.gain_db
    }

    pub fn backlog(&self) -> &Backlog {
        &self.backlog
    }

    pub fn clock_ms(&self) -> i64 {
        self.clock_ms
    }

    pub fn audit_log(&self) -> &[NodeEvent] {
        &self.audit
    }

    pub fn firmware(&self) -> &str {
        &self.firmware
    }

    pub fn reboots(&self) -> u32 {
        self.reboots
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    /// Unsent segments: sealed in the backlog plus any awaiting a key.
    pub fn pending(&self) -> usize {
        self.backlog.len() + self.unsealed.len()
    }

    /// Captures one segment at the current gain and queues it for upload.
    pub fn capture(&mut self, source: &mut dyn AudioSource) -> Result<SplSummary> {
        if source.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::Core(acslm_core::Error::RateMismatch {
                buffer: source.sample_rate_hz(),
                filter: self.cfg.sample_rate_hz,
            }));
        }
        let n = (self.cfg.segment_s * self.cfg.sample_rate_hz as f64).round() as usize;
        let mut samples = source.capture(self.next_seq, n)?;
        samples.truncate(n);
        let short = samples.len() < n;
        let g = 10f64.powf(self.gain_db / 20.0);
        samples.iter_mut().for_each(|v| *v *= g);
        quantize_pcm16(&mut samples);
        let audio = SampleBuffer::new(samples, self.cfg.sample_rate_hz)?;
        let spl_summary = SplSummary::of(&audio, &self.meter)?;
        let seg = Segment {
            node_id: self.cfg.node_id.clone(),
            seq: self.next_seq,
            start_time_ms: self.clock_ms,
            audio,
            spl_summary,
            short,
        };
        if let Some(tap) = self.tap.as_mut() {
            tap(&seg);
        }
        let payload = encode_segment(&seg, self.cfg.codec)?;
        self.next_seq += 1;
        self.clock_ms = seg.end_time_ms();
        self.stats.captured += 1;
        self.unsealed.push_back((seg.seq, payload));
        self.seal_pending()?;
        Ok(spl_summary)
    }

    fn seal_pending(&mut self) -> Result<()> {
        let Some(key) = self.server_key.clone() else {
            return Ok(());
        };
        while let Some((seq, payload)) = self.unsealed.pop_front() {
            let env = seal_envelope(&payload, &self.cfg.node_id, seq, &key, &mut OsRng)?.to_bytes();
            if !self.capacity_fixed {
                self.backlog.set_capacity(env.len().saturating_mul(DEFAULT_SEGMENTS));
                self.capacity_fixed = true;
            }
            self.backlog.insert(seq, env)?;
        }
        Ok(())
    }

    /// Spends up to `window_ms` of simulated time uploading. Returns once the
    /// window is used up or nothing is left to send.
    pub fn upload_window(&mut self, transport: &mut dyn Transport, window_ms: i64) -> Result<()> {
        self.net_clock_ms = self.net_clock_ms.max(self.clock_ms);
        let end = self.net_clock_ms + window_ms;
        loop {
            if self.server_key.is_some() && self.pending() == 0 {
                break;
            }
            if self.next_attempt_ms > self.net_clock_ms {
                if self.next_attempt_ms >= end {
                    break;
                }
                self.net_clock_ms = self.next_attempt_ms;
            }
            if self.net_clock_ms >= end {
                break;
            }
            match self.attempt(transport) {
                Ok(()) => {
                    self.failures = 0;
                    self.net_clock_ms += EXCHANGE_MS;
                    self.next_attempt_ms = self.net_clock_ms;
                }
                Err(Error::Transport(_)) | Err(Error::Protocol(_)) => {
                    self.failures += 1;
                    self.stats.link_failures += 1;
                    self.next_attempt_ms = self.net_clock_ms + backoff_ms(self.failures);
                }
                Err(e) => return Err(e),
            }
        }
        self.net_clock_ms = end;
        Ok(())
    }

    fn attempt(&mut self, transport: &mut dyn Transport) -> Result<()> {
        if self.server_key.is_none() {
            let resp = transport.exchange(&Request {
                control: ControlMessage::Hello {
                    node_id: self.cfg.node_id.clone(),
                },
                envelope: None,
            })?;
            let der = match (resp.control, resp.public_key) {
                (ControlMessage::Welcome, Some(der)) => der,
                (other, _) => return Err(Error::Protocol(format!("expected welcome, got {other:?}"))),
            };
            self.server_key = Some(public_key_from_der(&der).map_err(|e| Error::Protocol(e.to_string()))?);
            return self.seal_pending();
        }
        let Some((seq, env)) = self.backlog.oldest().map(|(s, b)| (s, b.to_vec())) else {
            return Ok(());
        };
        let resp = transport.exchange(&Request {
            control: ControlMessage::Upload {
                seq,
                applied: self.unconfirmed.clone(),
            },
            envelope: Some(env),
        })?;
        match resp.control {
            ControlMessage::Ack {
                seq: acked,
                contiguous,
                command,
            } if acked == seq => {
                self.backlog.remove(seq)?;
                if let Some(c) = contiguous {
                    self.backlog.remove_through(c)?;
                }
                self.stats.acked += 1;
                self.unconfirmed.clear();
                match command.map(|c| self.apply(c)) {
                    Some(Err(Error::GainOutOfRange(_))) | Some(Ok(())) | None => Ok(()),
                    Some(Err(e)) => Err(e),
                }
            }
            ControlMessage::Reject { seq: r, .. } if r == seq => {
                // The server will never accept this envelope; keeping it
                // would block the queue.
                self.backlog.remove(seq)?;
                self.stats.rejected += 1;
                Ok(())
            }
            other => Err(Error::Protocol(format!("unexpected reply to upload {seq}: {other:?}"))),
        }
    }

    /// Applies a command once per id. Repeats are only re-confirmed.
    pub fn apply(&mut self, cmd: NodeCommand) -> Result<()> {
        if !self.unconfirmed.contains(&cmd.id) {
            self.unconfirmed.push(cmd.id);
        }
        if !self.applied.insert(cmd.id) {
            return Ok(());
        }
        if let Err(e) = cmd.validate() {
            self.applied.remove(&cmd.id);
            self.unconfirmed.retain(|&id| id != cmd.id);
            return Err(e);
        }
        match &cmd.kind {
            CommandKind::Flush => {
                self.backlog.flush()?;
                self.unsealed.clear();
            }
            CommandKind::Reboot => {
                self.reboots += 1;
                self.server_key = None;
                self.failures = 0;
            }
            CommandKind::GainAdjust { delta_db } => self.gain_db += delta_db,
            CommandKind::Update { version } => self.firmware = version.clone(),
        }
        self.audit.push(NodeEvent {
            at_ms: self.net_clock_ms,
            command_id: cmd.id,
            kind: cmd.kind,
        });
        Ok(())
    }

    /// One capture followed by one upload window of the same length.
    pub fn run_minute(&mut self, source: &mut dyn AudioSource, transport: &mut dyn Transport) -> Result<SplSummary> {
        let summary = self.capture(source)?;
        let window = (self.cfg.segment_s * 1000.0).round() as i64;
        self.upload_window(transport, window)?;
        Ok(summary)
    }

    pub fn run(
        &mut self,
        source: &mut dyn AudioSource,
        transport: &mut dyn Transport,
        segments: usize,
    ) -> Result<Vec<SplSummary>> {
        (0..segments).map(|_| self.run_minute(source, transport)).collect()
    }

    /// Keeps uploading without capturing until everything is acked or
    /// `max_ms` of simulated time has passed. Returns whether it emptied.
    pub fn drain(&mut self, transport: &mut dyn Transport, max_ms: i64) -> Result<bool> {
        let stop = self.net_clock_ms.max(self.clock_ms) + max_ms;
        while self.net_clock_ms < stop {
            if self.server_key.is_some() && self.pending() == 0 {
                return Ok(true);
            }
            let step = (stop - self.net_clock_ms).min(60_000);
            self.upload_window(transport, step)?;
        }
        Ok(self.server_key.is_some() && self.pending() == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let v: Vec<i64> = (0..9).map(backoff_ms).collect();
        assert_eq!(v, vec![0, 5_000, 10_000, 20_000, 40_000, 80_000, 160_000, 300_000, 300_000]);
        assert_eq!(backoff_ms(1000), BACKOFF_CAP_MS);
    }

    #[test]
    fn calibrated_node_reads_pink_noise_level() {
        let cfg = NodeConfig {
            sample_rate_hz: 32_000,
            segment_s: 5.0,
            ..NodeConfig::default()
        };
        let mut node = Node::new(cfg).unwrap();
        let sens = 10f64.powf(-38.0 / 20.0);
        let amp = sine_amplitude_for_spl(94.0) * PA_PER_UNIT * sens;
        let n = 32_000;
        let tone: Vec<f64> = (0..n).map(|i| amp * (2.0 * PI * 1000.0 * i as f64 / 32_000.0).sin()).collect();
        let leq = node.meter().leq(&SampleBuffer::new(tone, 32_000).unwrap()).unwrap();
        assert!((leq - 94.0).abs() < 0.05, "{leq}");
        let mut src = PinkNoiseSource {
            sample_rate_hz: 32_000,
            seed: 3,
            rms: 0.01,
        };
        let s = node.capture(&mut src).unwrap();
        assert!(s.leq_dba > 60.0 && s.leq_dba < 100.0, "{s:?}");
        assert!(s.max_dba >= s.leq_dba - 1.0);
        assert_eq!(node.pending(), 1);
    }
}
