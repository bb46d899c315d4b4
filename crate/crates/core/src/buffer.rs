//! Mono sample buffers and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
pub const DEFAULT_BIT_DEPTH: u16 = 16;

const FULL_SCALE_SLACK: f64 = 1e-9;

/// Mono audio at a fixed rate. Full scale is 1.0.
///
/// Samples are finite and within full scale unless `clipped` is set, in which
/// case a producer (the microphone model, typically) has already limited them
/// and is reporting that fact.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    bit_depth: u16,
    clipped: bool,
}

impl SampleBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::with_flags(samples, sample_rate_hz, DEFAULT_BIT_DEPTH, false)
    }

    pub fn with_flags(
        samples: Vec<f64>,
        sample_rate_hz: u32,
        bit_depth: u16,
        clipped: bool,
    ) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidBuffer("sample rate must be positive".into()));
        }
        if let Some((i, x)) = samples.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::InvalidBuffer(format!(
                "sample {i} is not finite ({x})"
            )));
        }
        if !clipped {
            if let Some((i, x)) = samples
                .iter()
                .enumerate()
                .find(|(_, x)| x.abs() > 1.0 + FULL_SCALE_SLACK)
            {
                return Err(Error::InvalidBuffer(format!(
                    "sample {i} exceeds full scale ({x}) and buffer is not marked clipped"
                )));
            }
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            bit_depth,
            clipped,
        })
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz,
            bit_depth: DEFAULT_BIT_DEPTH,
            clipped: false,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn bit_depth(&self) -> u16 {
        self.bit_depth
    }

    pub fn is_clipped(&self) -> bool {
        self.clipped
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Same rate and flags, new samples. Used by filters that preserve length.
    pub(crate) fn derive(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
            bit_depth: self.bit_depth,
            clipped: self.clipped,
        }
    }

    pub(crate) fn from_parts(samples: Vec<f64>, sample_rate_hz: u32, clipped: bool) -> Self {
        Self {
            samples,
            sample_rate_hz,
            bit_depth: DEFAULT_BIT_DEPTH,
            clipped,
        }
    }

    /// Multiplies every sample by `gain`. The result must stay within full scale.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::with_flags(
            self.samples.iter().map(|x| x * gain).collect(),
            self.sample_rate_hz,
            self.bit_depth,
            self.clipped,
        )
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        self.derive(self.samples[start.min(self.len())..end.min(self.len())].to_vec())
    }

    pub fn concat(&self, other: &SampleBuffer) -> Result<Self> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(Error::RateMismatch {
                buffer: other.sample_rate_hz,
                filter: self.sample_rate_hz,
            });
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
            bit_depth: self.bit_depth,
            clipped: self.clipped || other.clipped,
        })
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidBuffer(format!(
                "expected mono audio, file has {} channels",
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::InvalidBuffer(format!(
                "expected 16-bit integer PCM, file is {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(pcm16_to_f64))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::with_flags(samples, spec.sample_rate, 16, false)
    }

    /// Writes the buffer as mono 16-bit PCM, clamping to full scale.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &x in &self.samples {
            writer.write_sample(f64_to_pcm16(x))?;
        }
        writer.finalize()?;
        Ok(())
    }
}

pub fn pcm16_to_f64(s: i16) -> f64 {
    s as f64 / 32768.0
}

pub fn f64_to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Root mean square of a slice. Zero for an empty slice.
pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_over_range() {
        assert!(SampleBuffer::new(vec![0.0, f64::NAN], 44_100).is_err());
        assert!(SampleBuffer::new(vec![1.5], 44_100).is_err());
        assert!(SampleBuffer::with_flags(vec![1.5], 44_100, 16, true).is_ok());
        assert!(SampleBuffer::new(vec![1.0 + 1e-10], 44_100).is_ok());
        assert!(SampleBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_round_trip_is_exact_on_the_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let samples: Vec<f64> = (-100..100).map(|k| pcm16_to_f64(k * 163)).collect();
        let buf = SampleBuffer::new(samples, 44_100).unwrap();
        buf.write_wav(&path).unwrap();
        let back = SampleBuffer::read_wav(&path).unwrap();
        assert_eq!(back.samples(), buf.samples());
        assert_eq!(back.sample_rate_hz(), 44_100);
    }

    #[test]
    fn pcm_conversion_clamps() {
        assert_eq!(f64_to_pcm16(1.0), 32767);
        assert_eq!(f64_to_pcm16(-1.0), -32768);
        assert_eq!(f64_to_pcm16(0.0), 0);
    }
}
