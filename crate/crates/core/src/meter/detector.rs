use serde::{Deserialize, Serialize};

use super::calibration::CalibrationState;
use super::series::{Reading, SplSeries};
use super::{power_to_level, DEFAULT_INTERVAL_S};
use crate::buffer::SampleBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWeighting {
    pub tau_s: f64,
}

impl TimeWeighting {
    pub const FAST: TimeWeighting = TimeWeighting { tau_s: 0.125 };
    pub const SLOW: TimeWeighting = TimeWeighting { tau_s: 1.0 };

    pub fn new(tau_s: f64) -> Result<Self> {
        if tau_s.is_finite() && tau_s > 0.0 {
            Ok(Self { tau_s })
        } else {
            Err(Error::InvalidStimulus(format!(
                "time constant must be positive, got {tau_s}"
            )))
        }
    }

    pub fn label(&self) -> &'static str {
        if self.tau_s == Self::FAST.tau_s {
            "fast"
        } else if self.tau_s == Self::SLOW.tau_s {
            "slow"
        } else {
            "custom"
        }
    }
}

impl std::str::FromStr for TimeWeighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fast" | "f" => Ok(Self::FAST),
            "slow" | "s" => Ok(Self::SLOW),
            other => other
                .parse::<f64>()
                .ok()
                .and_then(|t| Self::new(t).ok())
                .ok_or_else(|| format!("unknown detector '{other}' (fast, slow or seconds)")),
        }
    }
}

/// One-pole average of the squared signal, `y[n] = a y[n-1] + (1 - a) x[n]^2`
/// with `a = exp(-1 / (fs tau))`, sampled every `interval` for readings and
/// max-held on every sample.
#[derive(Debug, Clone)]
pub struct ExponentialDetector {
    a: f64,
    y: f64,
    max_y: f64,
    offset_db: f64,
    sample_rate_hz: u32,
    interval_s: f64,
    time_weighting: TimeWeighting,
    n: u64,
    next_reading: u64,
    readings: Vec<Reading>,
}

impl ExponentialDetector {
    pub fn new(
        time_weighting: TimeWeighting,
        sample_rate_hz: u32,
        offset_db: f64,
        interval_s: f64,
    ) -> Self {
        let a = (-1.0 / (sample_rate_hz as f64 * time_weighting.tau_s)).exp();
        let mut det = Self {
            a,
            y: 0.0,
            max_y: 0.0,
            offset_db,
            sample_rate_hz,
            interval_s,
            time_weighting,
            n: 0,
            next_reading: 0,
            readings: Vec::new(),
        };
        det.next_reading = det.reading_index(1);
        det
    }

    fn reading_index(&self, k: usize) -> u64 {
        (k as f64 * self.interval_s * self.sample_rate_hz as f64).round() as u64
    }

    pub fn push(&mut self, block: &[f64]) {
        let b = 1.0 - self.a;
        for &x in block {
            self.y = self.a * self.y + b * x * x;
            if self.y > self.max_y {
                self.max_y = self.y;
            }
            self.n += 1;
            if self.n == self.next_reading {
                let k = self.readings.len() + 1;
                self.readings.push(Reading {
                    t_s: k as f64 * self.interval_s,
                    level_db: power_to_level(self.y, self.offset_db),
                });
                self.next_reading = self.reading_index(k + 1);
            }
        }
    }

    /// Current detector output in dB (offset applied).
    pub fn level_db(&self) -> f64 {
        power_to_level(self.y, self.offset_db)
    }

    pub fn max_level_db(&self) -> f64 {
        power_to_level(self.max_y, self.offset_db)
    }

    pub fn samples_seen(&self) -> u64 {
        self.n
    }

    pub fn finish(self) -> SplSeries {
        SplSeries {
            max_level_db: power_to_level(self.max_y, self.offset_db),
            readings: self.readings,
            detector: self.time_weighting,
            weighting: None,
            interval_s: self.interval_s,
        }
    }
}

/// Runs the exponential detector over an already weighted buffer.
pub fn exponential_detector(
    buffer: &SampleBuffer,
    time_weighting: TimeWeighting,
    cal: &CalibrationState,
) -> Result<SplSeries> {
    exponential_detector_with_interval(buffer, time_weighting, cal, DEFAULT_INTERVAL_S)
}

pub fn exponential_detector_with_interval(
    buffer: &SampleBuffer,
    time_weighting: TimeWeighting,
    cal: &CalibrationState,
    interval_s: f64,
) -> Result<SplSeries> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut det = ExponentialDetector::new(
        time_weighting,
        buffer.sample_rate_hz(),
        cal.offset_db,
        interval_s,
    );
    det.push(buffer.samples());
    Ok(det.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meter::FLOOR_DB;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64, secs: f64, fs: u32) -> Vec<f64> {
        (0..(secs * fs as f64) as usize)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / fs as f64).sin())
            .collect()
    }

    #[test]
    fn silence_reads_floor_sentinel() {
        let buf = SampleBuffer::silence(44_100, 44_100);
        let s = exponential_detector(&buf, TimeWeighting::FAST, &CalibrationState::relative())
            .unwrap();
        assert!(s.readings.iter().all(|r| r.level_db <= FLOOR_DB));
        assert_eq!(s.max_level_db, FLOOR_DB);
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let buf = SampleBuffer::silence(0, 44_100);
        assert!(matches!(
            exponential_detector(&buf, TimeWeighting::FAST, &CalibrationState::relative()),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn steady_tone_converges_to_mean_square() {
        let buf = SampleBuffer::new(tone(1000.0, 0.5, 3.0, 44_100), 44_100).unwrap();
        let s = exponential_detector(&buf, TimeWeighting::FAST, &CalibrationState::relative())
            .unwrap();
        let expect = 10.0 * (0.125f64).log10();
        let last = s.readings.last().unwrap().level_db;
        assert!((last - expect).abs() < 0.01, "{last} vs {expect}");
        assert_eq!(s.readings.len(), 24);
        assert!(s.readings.windows(2).all(|w| w[1].t_s > w[0].t_s));
    }

    #[test]
    fn step_response_follows_exponential_rise() {
        // Tone switched on at t0 = 0.5 s.
        let fs = 44_100;
        let mut x = vec![0.0; fs as usize / 2];
        x.extend(tone(1000.0, 0.5, 2.5, fs));
        let buf = SampleBuffer::new(x, fs).unwrap();
        let s = exponential_detector(&buf, TimeWeighting::FAST, &CalibrationState::relative())
            .unwrap();
        let plateau = 10.0 * (0.125f64).log10();
        for r in s.readings.iter().filter(|r| r.t_s > 0.5 + 0.05) {
            let dt = r.t_s - 0.5;
            let expect = 10.0 * (1.0 - (-dt / 0.125).exp()).log10();
            assert!(
                (r.level_db - plateau - expect).abs() < 0.1,
                "t={} got {} expect {}",
                r.t_s,
                r.level_db - plateau,
                expect
            );
        }
    }

    #[test]
    fn parses_detector_names() {
        assert_eq!("fast".parse::<TimeWeighting>().unwrap(), TimeWeighting::FAST);
        assert_eq!("Slow".parse::<TimeWeighting>().unwrap(), TimeWeighting::SLOW);
        assert!("-1".parse::<TimeWeighting>().is_err());
    }
}
