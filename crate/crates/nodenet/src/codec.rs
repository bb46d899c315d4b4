//! Segment payload format.
//!
//! ```text
//! "ACSP" | version u8 | codec u8 | node_id (u16 len + utf8) | seq u64
//! | start_time_ms i64 | rate u32 | samples u32 | short u8 | leq f64 | max f64
//! | body len u32 | body | crc32 u32
//! ```
//!
//! All integers little-endian; the CRC covers everything before it. The
//! lossless body is a sequence of blocks, each with a fixed polynomial
//! predictor (order 0 to 4) and Rice-coded residuals.

use acslm_core::buffer::{f64_to_pcm16, pcm16_to_f64};
use acslm_core::SampleBuffer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{Segment, SplSummary};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"ACSP";
pub const PAYLOAD_VERSION: u8 = 1;
const BLOCK: usize = 4096;
const MAX_ORDER: usize = 4;
const MAX_RICE_K: u32 = 24;
/// Quotients this long switch to a raw 32-bit escape.
const RICE_ESCAPE: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Store,
    Lossless,
}

impl Codec {
    fn id(self) -> u8 {
        match self {
            Codec::Store => 0,
            Codec::Lossless => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Codec::Store),
            1 => Ok(Codec::Lossless),
            x => Err(Error::Malformed(format!("unknown codec id {x}"))),
        }
    }
}

impl std::str::FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "store" => Ok(Codec::Store),
            "lossless" => Ok(Codec::Lossless),
            o => Err(format!("unknown codec '{o}' (store or lossless)")),
        }
    }
}

fn to_pcm(audio: &SampleBuffer) -> Result<Vec<i16>> {
    audio
        .samples()
        .iter()
        .map(|&x| {
            let s = f64_to_pcm16(x);
            if pcm16_to_f64(s) == x {
                Ok(s)
            } else {
                Err(Error::Malformed(format!("sample {x} is not on the 16-bit grid")))
            }
        })
        .collect()
}

pub fn encode_segment(seg: &Segment, codec: Codec) -> Result<Vec<u8>> {
    let pcm = to_pcm(&seg.audio)?;
    let body = match codec {
        Codec::Store => pcm.iter().flat_map(|s| s.to_le_bytes()).collect(),
        Codec::Lossless => encode_lossless(&pcm),
    };
    let id = seg.node_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Malformed("node id too long".into()));
    }
    let mut out = Vec::with_capacity(body.len() + 64 + id.len());
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.push(PAYLOAD_VERSION);
    out.push(codec.id());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&seg.seq.to_le_bytes());
    out.extend_from_slice(&seg.start_time_ms.to_le_bytes());
    out.extend_from_slice(&seg.audio.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(pcm.len() as u32).to_le_bytes());
    out.push(seg.short as u8);
    out.extend_from_slice(&seg.spl_summary.leq_dba.to_le_bytes());
    out.extend_from_slice(&seg.spl_summary.max_dba.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Header fields of a payload, readable without decoding the audio.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadInfo {
    pub codec: Codec,
    pub node_id: String,
    pub seq: u64,
    pub start_time_ms: i64,
    pub sample_rate_hz: u32,
    pub samples: usize,
    pub short: bool,
    pub spl_summary: SplSummary,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Malformed("payload truncated".into()));
    }
    let (data, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(data);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(data)
}

fn parse_header<'a>(c: &mut Cursor<'a>) -> Result<PayloadInfo> {
    if c.take(4)? != PAYLOAD_MAGIC {
        return Err(Error::Malformed("bad payload magic".into()));
    }
    let version = c.array::<1>()?[0];
    if version != PAYLOAD_VERSION {
        return Err(Error::Malformed(format!("unsupported payload version {version}")));
    }
    let codec = Codec::from_id(c.array::<1>()?[0])?;
    let id_len = u16::from_le_bytes(c.array()?) as usize;
    let node_id = String::from_utf8(c.take(id_len)?.to_vec())
        .map_err(|_| Error::Malformed("node id is not utf-8".into()))?;
    Ok(PayloadInfo {
        codec,
        node_id,
        seq: u64::from_le_bytes(c.array()?),
        start_time_ms: i64::from_le_bytes(c.array()?),
        sample_rate_hz: u32::from_le_bytes(c.array()?),
        samples: u32::from_le_bytes(c.array()?) as usize,
        short: c.array::<1>()?[0] != 0,
        spl_summary: SplSummary {
            leq_dba: f64::from_le_bytes(c.array()?),
            max_dba: f64::from_le_bytes(c.array()?),
        },
    })
}

/// Checks the CRC and reads the header fields.
pub fn payload_info(bytes: &[u8]) -> Result<PayloadInfo> {
    let data = verify_crc(bytes)?;
    parse_header(&mut Cursor { buf: data, pos: 0 })
}

pub fn decode_segment(bytes: &[u8]) -> Result<Segment> {
    let data = verify_crc(bytes)?;
    let mut c = Cursor { buf: data, pos: 0 };
    let info = parse_header(&mut c)?;
    let body_len = u32::from_le_bytes(c.array()?) as usize;
    let body = c.take(body_len)?;
    if c.pos != data.len() {
        return Err(Error::Malformed("trailing bytes after body".into()));
    }
    let pcm = match info.codec {
        Codec::Store => {
            if body.len() != 2 * info.samples {
                return Err(Error::Malformed("store body length mismatch".into()));
            }
            body.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect()
        }
        Codec::Lossless => decode_lossless(body, info.samples)?,
    };
    let audio = SampleBuffer::new(pcm.into_iter().map(pcm16_to_f64).collect(), info.sample_rate_hz)?;
    Ok(Segment {
        node_id: info.node_id,
        seq: info.seq,
        start_time_ms: info.start_time_ms,
        audio,
        spl_summary: info.spl_summary,
        short: info.short,
    })
}

fn predict(x: &[i64], n: usize, order: usize) -> i64 {
    match order {
        0 => 0,
        1 => x[n - 1],
        2 => 2 * x[n - 1] - x[n - 2],
        3 => 3 * x[n - 1] - 3 * x[n - 2] + x[n - 3],
        _ => 4 * x[n - 1] - 6 * x[n - 2] + 4 * x[n - 3] - x[n - 4],
    }
}

fn zigzag(r: i64) -> u64 {
    ((r << 1) ^ (r >> 63)) as u64
}

fn unzigzag(u: u64) -> i64 {
    (u >> 1) as i64 ^ -((u & 1) as i64)
}

fn rice_bits(u: u64, k: u32) -> u64 {
    let q = u >> k;
    if q < RICE_ESCAPE as u64 {
        q + 1 + k as u64
    } else {
        RICE_ESCAPE as u64 + 32
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn put(&mut self, value: u64, bits: u32) {
        debug_assert!(bits <= 32);
        self.acc = (self.acc << bits) | (value & ((1u64 << bits) - 1));
        self.n += bits;
        while self.n >= 8 {
            self.n -= 8;
            self.out.push((self.acc >> self.n) as u8);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            let pad = 8 - self.n;
            self.put(0, pad);
        }
        self.out
    }
}

struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<u64> {
        let byte = *self
            .buf
            .get(self.pos / 8)
            .ok_or_else(|| Error::Malformed("bitstream truncated".into()))?;
        let b = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(b as u64)
    }

    fn bits(&mut self, n: u32) -> Result<u64> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }
}

fn encode_lossless(pcm: &[i16]) -> Vec<u8> {
    let mut out = Vec::new();
    for block in pcm.chunks(BLOCK) {
        let x: Vec<i64> = block.iter().map(|&s| s as i64).collect();
        let mut best: Option<(u64, usize, u32, Vec<u64>)> = None;
        for order in 0..=MAX_ORDER.min(x.len()) {
            let res: Vec<u64> = (order..x.len()).map(|n| zigzag(x[n] - predict(&x, n, order))).collect();
            let mean = res.iter().sum::<u64>() as f64 / res.len().max(1) as f64;
            let k0 = if mean >= 1.0 { mean.log2().floor() as u32 } else { 0 };
            for k in k0.saturating_sub(1)..=(k0 + 1).min(MAX_RICE_K) {
                let cost = res.iter().map(|&u| rice_bits(u, k)).sum::<u64>() + 16 * order as u64;
                if best.as_ref().map_or(true, |b| cost < b.0) {
                    best = Some((cost, order, k, res.clone()));
                }
            }
        }
        let (_, order, k, res) = best.expect("at least order 0");
        out.push(order as u8);
        out.push(k as u8);
        for &s in &block[..order] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let mut w = BitWriter {
            out: Vec::new(),
            acc: 0,
            n: 0,
        };
        for u in res {
            let q = u >> k;
            if q < RICE_ESCAPE as u64 {
                for _ in 0..q {
                    w.put(1, 1);
                }
                w.put(0, 1);
                w.put(u, k);
            } else {
                for _ in 0..RICE_ESCAPE {
                    w.put(1, 1);
                }
                w.put(u, 32);
            }
        }
        let bits = w.finish();
        out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
        out.extend_from_slice(&bits);
    }
    out
}

fn decode_lossless(body: &[u8], samples: usize) -> Result<Vec<i16>> {
    let mut c = Cursor { buf: body, pos: 0 };
    let mut pcm = Vec::with_capacity(samples);
    while pcm.len() < samples {
        let len = BLOCK.min(samples - pcm.len());
        let order = c.array::<1>()?[0] as usize;
        let k = c.array::<1>()?[0] as u32;
        if order > MAX_ORDER || order > len || k > MAX_RICE_K {
            return Err(Error::Malformed(format!("bad block header (order {order}, k {k})")));
        }
        let mut x: Vec<i64> = Vec::with_capacity(len);
        for _ in 0..order {
            x.push(i16::from_le_bytes(c.array()?) as i64);
        }
        let nbytes = u32::from_le_bytes(c.array()?) as usize;
        let mut r = BitReader {
            buf: c.take(nbytes)?,
            pos: 0,
        };
        for n in order..len {
            let mut q = 0;
            while q < RICE_ESCAPE && r.bit()? == 1 {
                q += 1;
            }
            let u = if q == RICE_ESCAPE {
                r.bits(32)?
            } else {
                ((q as u64) << k) | r.bits(k)?
            };
            let v = predict(&x, n, order) + unzigzag(u);
            if v < i16::MIN as i64 || v > i16::MAX as i64 {
                return Err(Error::Malformed("decoded sample out of range".into()));
            }
            x.push(v);
        }
        pcm.extend(x.into_iter().map(|v| v as i16));
    }
    if c.pos != body.len() {
        return Err(Error::Malformed("trailing bytes in lossless body".into()));
    }
    Ok(pcm)
}
