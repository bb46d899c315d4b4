//! The calibrated meter chain: frequency weighting, squaring, exponential
//! time weighting, log conversion and calibration offset.

pub mod calibration;
pub mod detector;
pub mod series;
pub mod weighting;

pub use calibration::{calibrate, CalibrationState, REFERENCE_FREQ_HZ, REFERENCE_LEVEL_DBA};
pub use detector::{exponential_detector, ExponentialDetector, TimeWeighting};
pub use series::{Reading, SplSeries};
pub use weighting::{
    apply_filter, design_frequency_weighting, WeightingFilter, WeightingKind, WeightingState,
};

use crate::buffer::SampleBuffer;
use crate::error::{Error, Result};

/// Readings at or below this many dB re full scale are reported as exactly
/// this value, regardless of calibration offset.
pub const FLOOR_DB: f64 = -120.0;

pub const DEFAULT_INTERVAL_S: f64 = 0.125;

pub fn power_to_level(power: f64, offset_db: f64) -> f64 {
    let dbfs = 10.0 * power.log10();
    if !(dbfs > FLOOR_DB) {
        FLOOR_DB
    } else {
        dbfs + offset_db
    }
}

/// Energy-equivalent level of a signal that has already been weighted.
pub fn leq_weighted(samples: &[f64], cal: &CalibrationState) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let ms = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
    Ok(power_to_level(ms, cal.offset_db))
}

pub fn leq(
    buffer: &SampleBuffer,
    weighting: &WeightingFilter,
    cal: &CalibrationState,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let weighted = apply_filter(buffer, weighting)?;
    leq_weighted(weighted.samples(), cal)
}

/// Energy mean of dB values.
pub fn energy_mean_db(levels: &[f64]) -> Option<f64> {
    if levels.is_empty() {
        return None;
    }
    let p = levels.iter().map(|l| 10f64.powf(l / 10.0)).sum::<f64>() / levels.len() as f64;
    Some(10.0 * p.log10())
}

/// A complete meter: weighting filter, detector and calibration.
#[derive(Debug, Clone)]
pub struct SplMeter {
    weighting: WeightingFilter,
    time_weighting: TimeWeighting,
    cal: CalibrationState,
    interval_s: f64,
}

impl SplMeter {
    pub fn new(kind: WeightingKind, sample_rate_hz: u32) -> Result<Self> {
        Ok(Self {
            weighting: design_frequency_weighting(kind, sample_rate_hz)?,
            time_weighting: TimeWeighting::FAST,
            cal: CalibrationState::relative(),
            interval_s: DEFAULT_INTERVAL_S,
        })
    }

    pub fn with_time_weighting(mut self, tw: TimeWeighting) -> Self {
        self.time_weighting = tw;
        self
    }

    pub fn with_interval(mut self, interval_s: f64) -> Self {
        self.interval_s = interval_s;
        self
    }

    pub fn with_calibration(mut self, cal: CalibrationState) -> Self {
        self.cal = cal;
        self
    }

    pub fn weighting(&self) -> &WeightingFilter {
        &self.weighting
    }

    pub fn time_weighting(&self) -> TimeWeighting {
        self.time_weighting
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.cal
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.weighting.design_rate_hz()
    }

    /// Calibrates against an unweighted reference recording.
    pub fn calibrate(&mut self, reference: &SampleBuffer, target_dba: f64) -> Result<&CalibrationState> {
        let weighted = apply_filter(reference, &self.weighting)?;
        self.cal = calibrate(&weighted, target_dba)?;
        Ok(&self.cal)
    }

    pub fn weight(&self, buffer: &SampleBuffer) -> Result<SampleBuffer> {
        apply_filter(buffer, &self.weighting)
    }

    pub fn measure(&self, buffer: &SampleBuffer) -> Result<SplSeries> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if buffer.sample_rate_hz() != self.sample_rate_hz() {
            return Err(Error::RateMismatch {
                buffer: buffer.sample_rate_hz(),
                filter: self.sample_rate_hz(),
            });
        }
        let mut stream = self.stream();
        stream.push(buffer.samples());
        Ok(stream.finish())
    }

    pub fn leq(&self, buffer: &SampleBuffer) -> Result<f64> {
        leq(buffer, &self.weighting, &self.cal)
    }

    pub fn stream(&self) -> MeterStream<'_> {
        MeterStream {
            kind: self.weighting.kind(),
            state: self.weighting.state(),
            detector: ExponentialDetector::new(
                self.time_weighting,
                self.sample_rate_hz(),
                self.cal.offset_db,
                self.interval_s,
            ),
            scratch: Vec::new(),
        }
    }
}

/// Incremental form of [`SplMeter::measure`] for signals too long to hold.
pub struct MeterStream<'a> {
    kind: WeightingKind,
    state: WeightingState<'a>,
    detector: ExponentialDetector,
    scratch: Vec<f64>,
}

impl MeterStream<'_> {
    pub fn push(&mut self, block: &[f64]) {
        self.scratch.clear();
        self.scratch.extend_from_slice(block);
        self.state.process(&mut self.scratch);
        self.detector.push(&self.scratch);
    }

    pub fn level_db(&self) -> f64 {
        self.detector.level_db()
    }

    pub fn finish(self) -> SplSeries {
        let mut s = self.detector.finish();
        s.weighting = Some(self.kind);
        s
    }
}
