use acslm_core::buffer::{f64_to_pcm16, pcm16_to_f64};
use acslm_core::meter::SplMeter;
use acslm_core::SampleBuffer;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SEGMENT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplSummary {
    pub leq_dba: f64,
    pub max_dba: f64,
}

impl SplSummary {
    pub fn of(audio: &SampleBuffer, meter: &SplMeter) -> Result<Self> {
        Ok(Self {
            leq_dba: meter.leq(audio)?,
            max_dba: meter.measure(audio)?.max_level_db,
        })
    }
}

/// One contiguous block of captured audio, normally a minute long.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub node_id: String,
    pub seq: u64,
    /// Milliseconds since the Unix epoch, UTC.
    pub start_time_ms: i64,
    pub audio: SampleBuffer,
    pub spl_summary: SplSummary,
    /// Set when the source ended before a full segment was collected.
    pub short: bool,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.audio.duration_s()
    }

    pub fn end_time_ms(&self) -> i64 {
        self.start_time_ms + (self.duration_s() * 1000.0).round() as i64
    }
}

/// Rounds samples onto the 16-bit grid, as the node's converter does.
pub fn quantize_pcm16(samples: &mut [f64]) {
    for v in samples {
        *v = pcm16_to_f64(f64_to_pcm16(*v));
    }
}

/// Cuts a sample stream into gapless, non-overlapping segments.
pub struct Segmenter {
    node_id: String,
    meter: SplMeter,
    segment_len: usize,
    next_seq: u64,
    next_start_ms: i64,
    pending: Vec<f64>,
}

impl Segmenter {
    pub fn new(node_id: impl Into<String>, meter: SplMeter, start_time_ms: i64) -> Self {
        Self::with_length(node_id, meter, start_time_ms, SEGMENT_S)
    }

    pub fn with_length(
        node_id: impl Into<String>,
        meter: SplMeter,
        start_time_ms: i64,
        segment_s: f64,
    ) -> Self {
        let segment_len = (segment_s * meter.sample_rate_hz() as f64).round().max(1.0) as usize;
        Self {
            node_id: node_id.into(),
            meter,
            segment_len,
            next_seq: 0,
            next_start_ms: start_time_ms,
            pending: Vec::with_capacity(segment_len),
        }
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn meter(&self) -> &SplMeter {
        &self.meter
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    pub fn push(&mut self, mut samples: &[f64]) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        while !samples.is_empty() {
            let take = (self.segment_len - self.pending.len()).min(samples.len());
            self.pending.extend_from_slice(&samples[..take]);
            samples = &samples[take..];
            if self.pending.len() == self.segment_len {
                out.push(self.emit(false)?);
            }
        }
        Ok(out)
    }

    /// Emits whatever is buffered as a short segment.
    pub fn finish(&mut self) -> Result<Option<Segment>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        self.emit(true).map(Some)
    }

    fn emit(&mut self, short: bool) -> Result<Segment> {
        let samples = std::mem::replace(&mut self.pending, Vec::with_capacity(self.segment_len));
        let audio = SampleBuffer::new(samples, self.meter.sample_rate_hz())?;
        let spl_summary = SplSummary::of(&audio, &self.meter)?;
        let seg = Segment {
            node_id: self.node_id.clone(),
            seq: self.next_seq,
            start_time_ms: self.next_start_ms,
            spl_summary,
            short,
            audio,
        };
        self.next_seq += 1;
        self.next_start_ms = seg.end_time_ms();
        Ok(seg)
    }
}

/// Segments an iterator of sample blocks. A trailing partial segment is
/// emitted with `short` set.
pub fn segment_stream<I>(blocks: I, segmenter: Segmenter) -> SegmentStream<I::IntoIter>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    SegmentStream {
        blocks: blocks.into_iter(),
        segmenter,
        ready: std::collections::VecDeque::new(),
        done: false,
    }
}

pub struct SegmentStream<I> {
    blocks: I,
    segmenter: Segmenter,
    ready: std::collections::VecDeque<Segment>,
    done: bool,
}

impl<I: Iterator<Item = Vec<f64>>> Iterator for SegmentStream<I> {
    type Item = Result<Segment>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(s) = self.ready.pop_front() {
                return Some(Ok(s));
            }
            if self.done {
                return None;
            }
            match self.blocks.next() {
                Some(block) => match self.segmenter.push(&block) {
                    Ok(v) => self.ready.extend(v),
                    Err(e) => return Some(Err(e)),
                },
                None => {
                    self.done = true;
                    match self.segmenter.finish() {
                        Ok(Some(s)) => return Some(Ok(s)),
                        Ok(None) => return None,
                        Err(e) => return Some(Err(e)),
                    }
                }
            }
        }
    }
}
