use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use super::detector::{exponential_detector, TimeWeighting};
use crate::buffer::SampleBuffer;
use crate::convolve::rfft;
use crate::error::{Error, Result};

pub const REFERENCE_LEVEL_DBA: f64 = 94.0;
pub const REFERENCE_FREQ_HZ: f64 = 1000.0;

const MIN_REFERENCE_S: f64 = 1.0;
const MAX_PLATEAU_STD_DB: f64 = 0.1;
const MIN_TONE_FRACTION: f64 = 0.9;
/// The Fast detector is within 0.011 dB of its plateau after six time constants.
const SETTLE_TAU: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub offset_db: f64,
    pub reference_level_dba: f64,
    pub reference_freq_hz: f64,
    #[serde(skip)]
    pub calibrated_at: Option<SystemTime>,
}

impl CalibrationState {
    /// Zero offset, for relative (dBFS) work.
    pub fn relative() -> Self {
        Self {
            offset_db: 0.0,
            reference_level_dba: REFERENCE_LEVEL_DBA,
            reference_freq_hz: REFERENCE_FREQ_HZ,
            calibrated_at: None,
        }
    }

    pub fn with_offset(offset_db: f64) -> Self {
        Self {
            offset_db,
            ..Self::relative()
        }
    }
}

/// Plateau of the Fast detector on a steady reference tone: mean and standard
/// deviation of the readings after the detector has settled.
pub(crate) fn plateau(buffer: &SampleBuffer) -> Result<(f64, f64)> {
    let series =
        exponential_detector(buffer, TimeWeighting::FAST, &CalibrationState::relative())?;
    let settle = (SETTLE_TAU * TimeWeighting::FAST.tau_s).max(buffer.duration_s() / 2.0);
    let levels: Vec<f64> = series
        .readings
        .iter()
        .filter(|r| r.t_s >= settle - 1e-9)
        .map(|r| r.level_db)
        .collect();
    if levels.is_empty() {
        return Err(Error::ReferenceTooShort {
            got_s: buffer.duration_s(),
            need_s: MIN_REFERENCE_S,
        });
    }
    let mean = levels.iter().sum::<f64>() / levels.len() as f64;
    let var = levels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / levels.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of signal energy within [0.8, 1.25] x `freq_hz`.
fn tone_fraction(samples: &[f64], sample_rate_hz: u32, freq_hz: f64) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let windowed: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            x * w
        })
        .collect();
    let spec = rfft(&windowed, n);
    let bin_hz = sample_rate_hz as f64 / n as f64;
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, c) in spec.iter().enumerate() {
        let p = c.norm_sqr();
        total += p;
        let f = k as f64 * bin_hz;
        if f >= 0.8 * freq_hz && f <= 1.25 * freq_hz {
            inside += p;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Chooses the offset that makes the Fast-detector plateau of `reference`
/// read `target_dba`. The reference is expected to be the weighted signal of
/// a steady ~1 kHz tone lasting at least one second.
pub fn calibrate(reference: &SampleBuffer, target_dba: f64) -> Result<CalibrationState> {
    if reference.duration_s() < MIN_REFERENCE_S - 1e-9 {
        return Err(Error::ReferenceTooShort {
            got_s: reference.duration_s(),
            need_s: MIN_REFERENCE_S,
        });
    }
    let (mean, std) = plateau(reference)?;
    let half = reference.len() / 2;
    let fraction = tone_fraction(
        &reference.samples()[half..],
        reference.sample_rate_hz(),
        REFERENCE_FREQ_HZ,
    );
    if std > MAX_PLATEAU_STD_DB || fraction < MIN_TONE_FRACTION || !mean.is_finite() {
        return Err(Error::UnstableReference {
            plateau_std_db: std,
            tone_fraction: fraction,
        });
    }
    Ok(CalibrationState {
        offset_db: target_dba - mean,
        reference_level_dba: target_dba,
        reference_freq_hz: REFERENCE_FREQ_HZ,
        calibrated_at: Some(SystemTime::now()),
    })
}
