//! Virtual analog MEMS microphone: frequency response, sensitivity, white
//! self-noise, optional supply hum and hard clipping at the overload point.
//!
//! Input buffers carry acoustic pressure with 1.0 = [`PA_PER_UNIT`] pascal.
//! Output buffers carry ADC samples with 1.0 = 1 V.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::convolve::{irfft, rfft, AlignedFir};
use crate::error::{Error, Result};
use crate::meter::{design_frequency_weighting, WeightingFilter, WeightingKind};
use crate::response::MagnitudeResponse;

pub const PA_PER_UNIT: f64 = 200.0;
pub const P_REF_PA: f64 = 20e-6;
pub const REFERENCE_SPL_DB: f64 = 94.0;

const MIC_CURVE_V1: &str = include_str!("../assets/mic_curve_v1.csv");
const MIN_PHASE_GRID: usize = 32_768;
const MIN_PHASE_TAPS: usize = 4096;

/// Peak amplitude, in pressure units, of a sine at `spl_db`.
pub fn sine_amplitude_for_spl(spl_db: f64) -> f64 {
    2f64.sqrt() * P_REF_PA * 10f64.powf(spl_db / 20.0) / PA_PER_UNIT
}

/// RMS, in pressure units, of a signal at `spl_db`.
pub fn rms_for_spl(spl_db: f64) -> f64 {
    P_REF_PA * 10f64.powf(spl_db / 20.0) / PA_PER_UNIT
}

/// The shipped synthetic response (version 1), normalised at 1 kHz.
pub fn default_mic_curve() -> MagnitudeResponse {
    MagnitudeResponse::read_csv(MIC_CURVE_V1.as_bytes()).expect("bundled mic curve parses")
}

/// Closed form behind the bundled curve: a first-order high-pass at 200 Hz
/// and a +8 dB peaking resonance at 13 kHz with Q 2, normalised at 1 kHz.
pub fn synthetic_mic_curve_db(f: f64) -> f64 {
    fn raw(f: f64) -> f64 {
        let r = f / 200.0;
        let hp = 10.0 * (r * r / (1.0 + r * r)).log10();
        let a = 10f64.powf(8.0 / 40.0);
        let q = 2.0;
        let s = Complex64::new(0.0, f / 13_000.0);
        let h = (s * s + s * (a / q) + 1.0) / (s * s + s / (a * q) + 1.0);
        hp + 20.0 * h.norm().log10()
    }
    raw(f) - raw(1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicResponseModel {
    pub response: MagnitudeResponse,
    pub sensitivity_db_re_1v_pa: f64,
    pub overload_dba: f64,
    pub noise_floor_dba: f64,
    pub noise_enabled: bool,
    pub seed: u64,
}

impl Default for MicResponseModel {
    fn default() -> Self {
        Self {
            response: default_mic_curve(),
            sensitivity_db_re_1v_pa: -38.0,
            overload_dba: 118.0,
            noise_floor_dba: 29.9,
            noise_enabled: true,
            seed: 1,
        }
    }
}

impl MicResponseModel {
    /// Default sensitivity and limits with a flat response.
    pub fn flat() -> Self {
        Self {
            response: MagnitudeResponse::flat(10.0, 24_000.0),
            ..Self::default()
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overload_dba > self.noise_floor_dba) {
            return Err(Error::InvalidResponse(format!(
                "overload {} dBA must exceed noise floor {} dBA",
                self.overload_dba, self.noise_floor_dba
            )));
        }
        if self.response.f_min() > 20.0 || self.response.f_max() < 20_000.0 {
            return Err(Error::InvalidResponse(
                "mic response must cover 20 Hz to 20 kHz".into(),
            ));
        }
        if !self.sensitivity_db_re_1v_pa.is_finite() {
            return Err(Error::InvalidResponse("sensitivity must be finite".into()));
        }
        Ok(())
    }

    /// Volts per pascal.
    pub fn sensitivity_v_per_pa(&self) -> f64 {
        10f64.powf(self.sensitivity_db_re_1v_pa / 20.0)
    }

    /// Output amplitude at which the ADC signal is hard-clipped.
    pub fn clip_amplitude(&self) -> f64 {
        (sine_amplitude_for_spl(self.overload_dba) * PA_PER_UNIT * self.sensitivity_v_per_pa())
            .min(1.0)
    }

    /// Mean-square output of a 94 dB SPL 1 kHz tone.
    pub fn reference_power(&self) -> f64 {
        let a = sine_amplitude_for_spl(REFERENCE_SPL_DB) * PA_PER_UNIT * self.sensitivity_v_per_pa();
        a * a / 2.0
    }

    /// Standard deviation of white noise that reads `level_dba` through `a_filter`.
    pub fn noise_sigma(&self, level_dba: f64, a_filter: &WeightingFilter) -> f64 {
        let g = a_filter.white_noise_power_gain();
        (self.reference_power() * 10f64.powf((level_dba - REFERENCE_SPL_DB) / 10.0) / g).sqrt()
    }

    fn is_flat(&self) -> bool {
        self.response.levels_db().iter().all(|l| l.abs() < 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    pub hum_fundamental_hz: f64,
    /// Peak level of each harmonic in dB re full scale, fundamental first.
    pub harmonic_levels_db: Vec<f64>,
    pub enabled: bool,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            hum_fundamental_hz: 750.0,
            harmonic_levels_db: vec![-80.0, -86.0, -92.0, -98.0],
            enabled: true,
        }
    }
}

impl DisturbanceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.hum_fundamental_hz.is_finite() && self.hum_fundamental_hz > 0.0)
            || self.harmonic_levels_db.iter().any(|l| !l.is_finite())
        {
            return Err(Error::InvalidStimulus("hum parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub dynamic_range_db: f64,
    pub snr_at_94_db: f64,
}

pub fn derived_metrics(model: &MicResponseModel) -> DerivedMetrics {
    DerivedMetrics {
        dynamic_range_db: model.overload_dba - model.noise_floor_dba,
        snr_at_94_db: REFERENCE_SPL_DB - model.noise_floor_dba,
    }
}

/// Minimum-phase FIR whose magnitude follows `response` (dB) at `sample_rate_hz`,
/// built with the real-cepstrum method. Frequencies outside the response grid
/// hold the edge values.
pub fn minimum_phase_fir(response: &MagnitudeResponse, sample_rate_hz: u32, taps: usize) -> Vec<f64> {
    let n = MIN_PHASE_GRID;
    let fs = sample_rate_hz as f64;
    let log_mag: Vec<Complex64> = (0..=n / 2)
        .map(|k| {
            let f = (k as f64 * fs / n as f64).max(response.f_min());
            Complex64::new(response.at(f) / 20.0 * std::f64::consts::LN_10, 0.0)
        })
        .collect();
    let cep = irfft(&log_mag, n);
    let mut folded = vec![0.0; n];
    folded[0] = cep[0];
    for k in 1..n / 2 {
        folded[k] = 2.0 * cep[k];
    }
    folded[n / 2] = cep[n / 2];
    let spec: Vec<Complex64> = rfft(&folded, n).into_iter().map(|c| c.exp()).collect();
    let mut h = irfft(&spec, n);
    h.truncate(taps.min(n));
    let fade = h.len() / 4;
    let start = h.len() - fade;
    for (i, v) in h[start..].iter_mut().enumerate() {
        *v *= 0.5 * (1.0 + (PI * i as f64 / fade as f64).cos());
    }
    h
}

/// Stateful microphone simulation for long signals.
pub struct MicStream {
    gain: f64,
    fir: Option<AlignedFir>,
    rng: ChaCha8Rng,
    sigma: f64,
    hum: Vec<(f64, f64)>,
    sample_rate_hz: u32,
    n: u64,
    clip: f64,
    clipped: bool,
}

impl MicStream {
    pub fn new(
        model: &MicResponseModel,
        disturbance: Option<&DisturbanceModel>,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        model.validate()?;
        if let Some(d) = disturbance {
            d.validate()?;
        }
        let fir = (!model.is_flat()).then(|| {
            let taps = minimum_phase_fir(&model.response.normalized(), sample_rate_hz, MIN_PHASE_TAPS);
            AlignedFir::new(&taps, 0)
        });
        let sigma = if model.noise_enabled {
            let a = design_frequency_weighting(WeightingKind::A, sample_rate_hz)?;
            model.noise_sigma(model.noise_floor_dba, &a)
        } else {
            0.0
        };
        let nyquist = sample_rate_hz as f64 / 2.0;
        let hum = disturbance
            .filter(|d| d.enabled)
            .map(|d| {
                d.harmonic_levels_db
                    .iter()
                    .enumerate()
                    .map(|(k, l)| (d.hum_fundamental_hz * (k + 1) as f64, 10f64.powf(l / 20.0)))
                    .filter(|(f, _)| *f < nyquist)
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            gain: PA_PER_UNIT * model.sensitivity_v_per_pa(),
            fir,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            sigma,
            hum,
            sample_rate_hz,
            n: 0,
            clip: model.clip_amplitude(),
            clipped: false,
        })
    }

    /// Converts a block of pressure samples. Output may lag the input by the
    /// FIR block latency; [`MicStream::finish`] flushes the remainder.
    pub fn process(&mut self, pressure: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = pressure.iter().map(|p| p * self.gain).collect();
        let out = match &mut self.fir {
            Some(fir) => fir.process(&scaled),
            None => scaled,
        };
        self.post(out)
    }

    pub fn finish(&mut self) -> Vec<f64> {
        let out = match &mut self.fir {
            Some(fir) => fir.finish(),
            None => Vec::new(),
        };
        self.post(out)
    }

    pub fn clipped(&self) -> bool {
        self.clipped
    }

    fn post(&mut self, mut x: Vec<f64>) -> Vec<f64> {
        let fs = self.sample_rate_hz as f64;
        for v in x.iter_mut() {
            if self.sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v += self.sigma * z;
            }
            if !self.hum.is_empty() {
                let t = self.n as f64 / fs;
                for (f, a) in &self.hum {
                    *v += a * (2.0 * PI * f * t).sin();
                }
            }
            if v.abs() > self.clip {
                *v = v.signum() * self.clip;
                self.clipped = true;
            }
            self.n += 1;
        }
        x
    }
}

/// Runs `pressure` through the virtual microphone. Clipping is reported
/// through [`SampleBuffer::is_clipped`].
pub fn simulate_microphone(
    pressure: &SampleBuffer,
    model: &MicResponseModel,
    disturbance: Option<&DisturbanceModel>,
) -> Result<SampleBuffer> {
    let mut stream = MicStream::new(model, disturbance, pressure.sample_rate_hz())?;
    let mut out = stream.process(pressure.samples());
    out.extend(stream.finish());
    Ok(SampleBuffer::from_parts(
        out,
        pressure.sample_rate_hz(),
        stream.clipped(),
    ))
}
