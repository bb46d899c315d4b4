//! Meter pipelines under test: an ideal meter fed directly with pressure, or
//! a device under test built from the microphone model and an optional
//! compensation filter. Everything streams in blocks so half-hour runs do not
//! need the whole signal in memory.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::compensation::{CompensationFilter, CompensationStream};
use crate::convolve::fft_convolve;
use crate::error::{Error, Result};
use crate::meter::{
    calibrate, design_frequency_weighting, power_to_level, CalibrationState, ExponentialDetector,
    SplSeries, TimeWeighting, WeightingFilter, WeightingKind, DEFAULT_INTERVAL_S,
};
use crate::mic::{sine_amplitude_for_spl, DisturbanceModel, MicResponseModel, MicStream};

const BLOCK: usize = 1 << 16;
const CALIBRATION_S: f64 = 3.0;

/// Where the microphone's nominal self-noise level is referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseAnchor {
    /// Noise reads the nominal floor at the microphone output.
    Microphone,
    /// Noise is rescaled so the full chain, compensation included, reads the
    /// nominal floor on silence.
    Output,
}

/// A step gain change injected after the microphone, for fault tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub at_s: f64,
    pub gain_db: f64,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    name: String,
    sample_rate_hz: u32,
    mic: Option<MicResponseModel>,
    disturbance: Option<DisturbanceModel>,
    compensation: Option<Arc<CompensationFilter>>,
    noise_anchor: NoiseAnchor,
    weighting: WeightingFilter,
    time_weighting: TimeWeighting,
    interval_s: f64,
    cal: Option<CalibrationState>,
    drift: Option<Drift>,
    max_hold: bool,
}

/// Output of one pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub series: SplSeries,
    /// Calibrated Leq for each requested `(start, end)` sample window.
    pub window_leq_db: Vec<f64>,
    pub clipped: bool,
}

impl Pipeline {
    pub fn ideal(sample_rate_hz: u32) -> Result<Self> {
        Ok(Self {
            name: "ideal".into(),
            sample_rate_hz,
            mic: None,
            disturbance: None,
            compensation: None,
            noise_anchor: NoiseAnchor::Output,
            weighting: design_frequency_weighting(WeightingKind::A, sample_rate_hz)?,
            time_weighting: TimeWeighting::FAST,
            interval_s: DEFAULT_INTERVAL_S,
            cal: None,
            drift: None,
            max_hold: true,
        })
    }

    pub fn dut(
        sample_rate_hz: u32,
        mic: MicResponseModel,
        compensation: Option<CompensationFilter>,
    ) -> Result<Self> {
        mic.validate()?;
        if let Some(c) = &compensation {
            if c.design_rate_hz() != sample_rate_hz {
                return Err(Error::RateMismatch {
                    buffer: sample_rate_hz,
                    filter: c.design_rate_hz(),
                });
            }
        }
        let mut p = Self::ideal(sample_rate_hz)?;
        p.name = if compensation.is_some() {
            "dut".into()
        } else {
            "dut-uncompensated".into()
        };
        p.mic = Some(mic);
        p.compensation = compensation.map(Arc::new);
        Ok(p)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_weighting(mut self, kind: WeightingKind) -> Result<Self> {
        self.weighting = design_frequency_weighting(kind, self.sample_rate_hz)?;
        self.cal = None;
        Ok(self)
    }

    pub fn with_time_weighting(mut self, tw: TimeWeighting) -> Self {
        self.time_weighting = tw;
        self
    }

    pub fn with_noise_anchor(mut self, anchor: NoiseAnchor) -> Self {
        self.noise_anchor = anchor;
        self
    }

    pub fn with_disturbance(mut self, d: DisturbanceModel) -> Self {
        self.disturbance = Some(d);
        self
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = Some(drift);
        self
    }

    /// Same pipeline with a different noise realisation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Some(m) = &mut self.mic {
            m.seed = seed;
        }
        self
    }

    pub fn without_max_hold(mut self) -> Self {
        self.max_hold = false;
        self
    }

    pub fn with_calibration(mut self, cal: CalibrationState) -> Self {
        self.cal = Some(cal);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn mic(&self) -> Option<&MicResponseModel> {
        self.mic.as_ref()
    }

    pub fn compensation(&self) -> Option<&CompensationFilter> {
        self.compensation.as_deref()
    }

    pub fn time_weighting(&self) -> TimeWeighting {
        self.time_weighting
    }

    pub fn has_max_hold(&self) -> bool {
        self.max_hold
    }

    pub fn calibration(&self) -> Option<&CalibrationState> {
        self.cal.as_ref()
    }

    pub fn is_calibrated(&self) -> bool {
        self.cal.is_some()
    }

    /// Noise floor, in dBA, that the complete chain reads on silence.
    /// `None` if there is no microphone or its noise is disabled.
    pub fn expected_noise_floor_dba(&self) -> Option<f64> {
        let m = self.mic.as_ref().filter(|m| m.noise_enabled)?;
        Some(match self.noise_anchor {
            NoiseAnchor::Output => m.noise_floor_dba,
            NoiseAnchor::Microphone => m.noise_floor_dba + self.noise_gain_db(),
        })
    }

    /// Change in A-weighted white-noise power caused by the compensation filter.
    pub fn noise_gain_db(&self) -> f64 {
        let Some(comp) = &self.compensation else {
            return 0.0;
        };
        let a = design_frequency_weighting(WeightingKind::A, self.sample_rate_hz)
            .expect("rate validated at construction");
        let ha = a.impulse_response(self.sample_rate_hz as usize * 2);
        let both = fft_convolve(comp.taps(), &ha);
        let g_both: f64 = both.iter().map(|v| v * v).sum();
        let g_a: f64 = ha.iter().map(|v| v * v).sum();
        10.0 * (g_both / g_a).log10()
    }

    fn effective_mic(&self) -> Option<MicResponseModel> {
        let mut m = self.mic.clone()?;
        if self.noise_anchor == NoiseAnchor::Output {
            m.noise_floor_dba -= self.noise_gain_db();
        }
        Some(m)
    }

    /// Calibrates with a 94 dB, 1 kHz tone at the pipeline input.
    pub fn calibrate(&mut self) -> Result<&CalibrationState> {
        let fs = self.sample_rate_hz as f64;
        let a = sine_amplitude_for_spl(94.0);
        let n = (CALIBRATION_S * fs) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| a * (2.0 * PI * 1000.0 * i as f64 / fs).sin())
            .collect();
        let weighted = self.weighted(&SampleBuffer::from_parts(x, self.sample_rate_hz, false))?;
        self.cal = Some(calibrate(&weighted, 94.0)?);
        Ok(self.cal.as_ref().unwrap())
    }

    pub fn calibrated(mut self) -> Result<Self> {
        self.calibrate()?;
        Ok(self)
    }

    /// Frequency-weighted signal just ahead of the detector.
    pub fn weighted(&self, input: &SampleBuffer) -> Result<SampleBuffer> {
        let mut out = Vec::with_capacity(input.len());
        let clipped = self.drive(input.len(), input.sample_rate_hz(), |off, buf| {
            buf.copy_from_slice(&input.samples()[off..off + buf.len()])
        }, |block| out.extend_from_slice(block))?;
        Ok(SampleBuffer::from_parts(out, self.sample_rate_hz, clipped))
    }

    pub fn run(&self, input: &SampleBuffer, windows: &[(usize, usize)]) -> Result<RunOutput> {
        self.run_source(
            input.len(),
            input.sample_rate_hz(),
            |off, buf| buf.copy_from_slice(&input.samples()[off..off + buf.len()]),
            windows,
        )
    }

    /// Runs `len` samples produced on demand by `fill(offset, block)`.
    pub fn run_source(
        &self,
        len: usize,
        rate: u32,
        fill: impl FnMut(usize, &mut [f64]),
        windows: &[(usize, usize)],
    ) -> Result<RunOutput> {
        let cal = self
            .cal
            .as_ref()
            .ok_or_else(|| Error::Uncalibrated(self.name.clone()))?;
        let mut det = ExponentialDetector::new(
            self.time_weighting,
            self.sample_rate_hz,
            cal.offset_db,
            self.interval_s,
        );
        let mut energy = vec![0.0; windows.len()];
        let mut n = 0usize;
        let clipped = self.drive(len, rate, fill, |block| {
            det.push(block);
            for (w, e) in windows.iter().zip(energy.iter_mut()) {
                let lo = w.0.max(n);
                let hi = w.1.min(n + block.len());
                if lo < hi {
                    *e += block[lo - n..hi - n].iter().map(|v| v * v).sum::<f64>();
                }
            }
            n += block.len();
        })?;
        let mut series = det.finish();
        series.weighting = Some(self.weighting.kind());
        let window_leq_db = windows
            .iter()
            .zip(&energy)
            .map(|(w, e)| {
                let len = w.1.saturating_sub(w.0).max(1);
                power_to_level(e / len as f64, cal.offset_db)
            })
            .collect();
        Ok(RunOutput {
            series,
            window_leq_db,
            clipped,
        })
    }

    /// Pushes the signal through microphone, drift, compensation and
    /// weighting, handing weighted blocks to `sink` in order.
    fn drive(
        &self,
        len: usize,
        rate: u32,
        mut fill: impl FnMut(usize, &mut [f64]),
        mut sink: impl FnMut(&[f64]),
    ) -> Result<bool> {
        if rate != self.sample_rate_hz {
            return Err(Error::RateMismatch {
                buffer: rate,
                filter: self.sample_rate_hz,
            });
        }
        if len == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut mic = match self.effective_mic() {
            Some(m) => Some(MicStream::new(&m, self.disturbance.as_ref(), rate)?),
            None => None,
        };
        let mut comp: Option<CompensationStream> = self.compensation.as_ref().map(|c| c.stream());
        let mut weight = self.weighting.state();
        let drift = self.drift.map(|d| {
            (
                (d.at_s * rate as f64).round() as usize,
                10f64.powf(d.gain_db / 20.0),
            )
        });
        let mut after_mic = 0usize;
        let mut input = vec![0.0; BLOCK];
        let mut off = 0usize;

        let mut stage = |mut x: Vec<f64>,
                         comp: &mut Option<CompensationStream>,
                         flush: bool,
                         sink: &mut dyn FnMut(&[f64])| {
            if let Some((at, g)) = drift {
                for (i, v) in x.iter_mut().enumerate() {
                    if after_mic + i >= at {
                        *v *= g;
                    }
                }
            }
            after_mic += x.len();
            let mut y = match comp {
                Some(c) => {
                    let mut y = c.process(&x);
                    if flush {
                        y.extend(c.finish());
                    }
                    y
                }
                None => x,
            };
            weight.process(&mut y);
            sink(&y);
        };

        while off < len {
            let take = BLOCK.min(len - off);
            let block = &mut input[..take];
            fill(off, block);
            off += take;
            let last = off == len;
            let mut x = match &mut mic {
                Some(m) => m.process(block),
                None => block.to_vec(),
            };
            if last {
                if let Some(m) = &mut mic {
                    x.extend(m.finish());
                }
            }
            stage(x, &mut comp, last, &mut sink);
        }
        Ok(mic.map(|m| m.clipped()).unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(spl: f64, f: f64, secs: f64) -> SampleBuffer {
        let a = sine_amplitude_for_spl(spl);
        let x = (0..(secs * 44_100.0) as usize)
            .map(|i| a * (2.0 * PI * f * i as f64 / 44_100.0).sin())
            .collect();
        SampleBuffer::new(x, 44_100).unwrap()
    }

    #[test]
    fn uncalibrated_run_is_an_error() {
        let p = Pipeline::ideal(44_100).unwrap();
        assert!(matches!(
            p.run(&tone(94.0, 1000.0, 1.0), &[]),
            Err(Error::Uncalibrated(_))
        ));
    }

    #[test]
    fn ideal_pipeline_reads_calibration_tone() {
        let p = Pipeline::ideal(44_100).unwrap().calibrated().unwrap();
        let n = 44_100 * 2;
        let out = p.run(&tone(94.0, 1000.0, 2.0), &[(n / 2, n)]).unwrap();
        assert!((out.window_leq_db[0] - 94.0).abs() < 0.01);
        let last = out.series.readings.last().unwrap().level_db;
        assert!((last - 94.0).abs() < 0.01);
    }

    #[test]
    fn streamed_output_is_sample_aligned() {
        let comp = CompensationFilter::from_taps(vec![0.25, 0.5, 0.25], 44_100).unwrap();
        let p = Pipeline::dut(44_100, MicResponseModel::flat().without_noise(), Some(comp))
            .unwrap()
            .with_weighting(WeightingKind::Z)
            .unwrap();
        let mut x = vec![0.0; BLOCK * 2 + 17];
        x[BLOCK + 3] = 0.01;
        let y = p
            .weighted(&SampleBuffer::new(x.clone(), 44_100).unwrap())
            .unwrap();
        assert_eq!(y.len(), x.len());
        let peak = y
            .samples()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, BLOCK + 3);
    }

    #[test]
    fn drift_raises_later_readings() {
        let p = Pipeline::ideal(44_100)
            .unwrap()
            .calibrated()
            .unwrap()
            .with_drift(Drift {
                at_s: 1.0,
                gain_db: 0.5,
            });
        let fs = 44_100;
        let out = p
            .run(&tone(94.0, 1000.0, 3.0), &[(fs / 2, fs), (fs * 2, fs * 3)])
            .unwrap();
        let d = out.window_leq_db[1] - out.window_leq_db[0];
        assert!((d - 0.5).abs() < 0.01, "{d}");
    }
}
