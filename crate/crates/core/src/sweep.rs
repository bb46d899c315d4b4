//! Exponential swept-sine measurement: sweep generation, deconvolution to an
//! impulse response, magnitude extraction and reference subtraction.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::convolve::{fft_convolve, rfft};
use crate::error::{Error, Result};
use crate::response::{log_grid, MagnitudeResponse};

pub const DEFAULT_NFFT: usize = 65_536;
const OUTPUT_PER_OCTAVE: usize = 96;

#[derive(Debug, Clone)]
pub struct SweepSignal {
    pub f_start_hz: f64,
    pub f_end_hz: f64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub samples: SampleBuffer,
    pub inverse: SampleBuffer,
}

impl SweepSignal {
    /// Sweep rate constant `L` in seconds: frequency grows by e every `L`.
    pub fn rate_constant_s(&self) -> f64 {
        self.duration_s / (self.f_end_hz / self.f_start_hz).ln()
    }

    pub fn instantaneous_frequency(&self, t_s: f64) -> f64 {
        self.f_start_hz * (t_s / self.rate_constant_s()).exp()
    }

    /// Index in a deconvolution output that corresponds to zero delay.
    pub fn zero_lag(&self) -> usize {
        self.samples.len() - 1
    }
}

pub fn generate_sweep(
    f_start_hz: f64,
    f_end_hz: f64,
    duration_s: f64,
    sample_rate_hz: u32,
) -> Result<SweepSignal> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(f_start_hz > 0.0 && f_start_hz < f_end_hz && f_end_hz <= nyquist) {
        return Err(Error::InvalidSweep(format!(
            "need 0 < f_start < f_end <= {nyquist} Hz, got {f_start_hz}..{f_end_hz}"
        )));
    }
    if !(duration_s >= 1.0) {
        return Err(Error::InvalidSweep(format!(
            "duration must be at least 1 s, got {duration_s}"
        )));
    }
    let fs = sample_rate_hz as f64;
    let n = (duration_s * fs).round() as usize;
    let l = duration_s / (f_end_hz / f_start_hz).ln();
    let k = 2.0 * PI * f_start_hz * l;
    let fade_in = ((0.5 * LN_2 * l * fs) as usize).max(1);
    let fade_out = ((LN_2 / 8.0 * l * fs) as usize).max(1);
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let mut v = (k * ((t / l).exp() - 1.0)).sin();
            if i < fade_in {
                v *= 0.5 - 0.5 * (PI * i as f64 / fade_in as f64).cos();
            }
            let from_end = n - 1 - i;
            if from_end < fade_out {
                v *= 0.5 - 0.5 * (PI * from_end as f64 / fade_out as f64).cos();
            }
            v
        })
        .collect();
    let mut inv: Vec<f64> = (0..n)
        .map(|i| x[n - 1 - i] * (-(i as f64) / fs / l).exp())
        .collect();
    // Scale for unit gain across the band clear of both fades.
    let nfft = (2 * n).next_power_of_two();
    let sx = rfft(&x, nfft);
    let si = rfft(&inv, nfft);
    let bin = fs / nfft as f64;
    let (lo, hi) = (f_start_hz * 2f64.sqrt(), f_end_hz * 2f64.powf(-0.25));
    let (sum, count) = sx
        .iter()
        .zip(&si)
        .enumerate()
        .filter(|(k, _)| (lo..=hi).contains(&(*k as f64 * bin)))
        .fold((0.0, 0usize), |(s, c), (_, (a, b))| (s + (a * b).norm(), c + 1));
    let gain = if count > 0 { sum / count as f64 } else { 1.0 };
    inv.iter_mut().for_each(|v| *v /= gain);
    Ok(SweepSignal {
        f_start_hz,
        f_end_hz,
        duration_s,
        sample_rate_hz,
        samples: SampleBuffer::new(x, sample_rate_hz)?,
        inverse: SampleBuffer::from_parts(inv, sample_rate_hz, false),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    peak_index: usize,
    zero_lag: usize,
}

impl ImpulseResponse {
    /// Wraps a causal impulse response whose zero-delay sample is index 0.
    pub fn from_samples(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::with_zero_lag(samples, sample_rate_hz, 0)
    }

    pub fn with_zero_lag(samples: Vec<f64>, sample_rate_hz: u32, zero_lag: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBuffer("impulse response is not finite".into()));
        }
        let peak_index = samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        Ok(Self {
            zero_lag: zero_lag.min(samples.len() - 1),
            samples,
            sample_rate_hz,
            peak_index,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn peak_index(&self) -> usize {
        self.peak_index
    }

    pub fn zero_lag(&self) -> usize {
        self.zero_lag
    }

    /// Peak over the largest magnitude outside `guard` samples of the peak, in dB.
    pub fn peak_to_sidelobe_db(&self, guard: usize) -> f64 {
        let peak = self.samples[self.peak_index].abs();
        let side = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| i.abs_diff(self.peak_index) > guard)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        20.0 * (peak / side.max(1e-300)).log10()
    }

    pub fn to_buffer(&self) -> SampleBuffer {
        SampleBuffer::from_parts(self.samples.clone(), self.sample_rate_hz, false)
    }
}

/// Convolves a recording with the sweep's inverse filter.
pub fn deconvolve(recorded: &SampleBuffer, sweep: &SweepSignal) -> Result<ImpulseResponse> {
    if recorded.sample_rate_hz() != sweep.sample_rate_hz {
        return Err(Error::RateMismatch {
            buffer: recorded.sample_rate_hz(),
            filter: sweep.sample_rate_hz,
        });
    }
    if recorded.len() < sweep.samples.len() {
        return Err(Error::InvalidSweep(format!(
            "recording has {} samples, shorter than the {}-sample sweep",
            recorded.len(),
            sweep.samples.len()
        )));
    }
    let full = fft_convolve(recorded.samples(), sweep.inverse.samples());
    ImpulseResponse::with_zero_lag(full, sweep.sample_rate_hz, sweep.zero_lag())
}

/// Plays `sweep` followed by `tail_s` of silence through `system` `averages`
/// times, averages the recordings and deconvolves.
pub fn measure_system(
    sweep: &SweepSignal,
    averages: usize,
    tail_s: f64,
    gain: f64,
    mut system: impl FnMut(&SampleBuffer) -> Result<SampleBuffer>,
) -> Result<ImpulseResponse> {
    let tail = (tail_s * sweep.sample_rate_hz as f64).round() as usize;
    let stimulus = sweep
        .samples
        .concat(&SampleBuffer::silence(tail, sweep.sample_rate_hz))?
        .scaled(gain)?;
    let mut acc = vec![0.0; stimulus.len()];
    let runs = averages.max(1);
    for _ in 0..runs {
        let rec = system(&stimulus)?;
        for (a, v) in acc.iter_mut().zip(rec.samples()) {
            *a += v / (runs as f64 * gain);
        }
    }
    deconvolve(
        &SampleBuffer::from_parts(acc, sweep.sample_rate_hz, false),
        sweep,
    )
}

/// Magnitude spectrum of `ir` in dB (not normalised), on a log grid.
///
/// `nfft` samples are taken starting `nfft / 16` samples before the zero lag,
/// with half-Hann fades over that lead-in and over the last eighth.
/// `smoothing` is the fractional-octave bandwidth denominator (24 for
/// 1/24 octave); `None` interpolates the raw spectrum.
pub fn spectrum_db(
    ir: &ImpulseResponse,
    nfft: usize,
    smoothing: Option<u32>,
) -> Result<MagnitudeResponse> {
    if nfft < 256 || !nfft.is_power_of_two() {
        return Err(Error::InvalidSweep(format!(
            "nfft must be a power of two of at least 256, got {nfft}"
        )));
    }
    let x = ir.samples();
    let lead = if ir.zero_lag() == 0 { 0 } else { nfft / 16 };
    let start = ir.zero_lag().saturating_sub(lead);
    let lead = ir.zero_lag() - start;
    let fade_out = nfft / 8;
    let seg: Vec<f64> = (0..nfft)
        .map(|i| {
            let v = x.get(start + i).copied().unwrap_or(0.0);
            let mut w = 1.0;
            if i < lead {
                w *= 0.5 - 0.5 * (PI * i as f64 / lead as f64).cos();
            }
            if i >= nfft - fade_out {
                let j = nfft - 1 - i;
                w *= 0.5 - 0.5 * (PI * j as f64 / fade_out as f64).cos();
            }
            v * w
        })
        .collect();
    let power: Vec<f64> = rfft(&seg, nfft).iter().map(|c| c.norm_sqr()).collect();
    let fs = ir.sample_rate_hz() as f64;
    let bin = fs / nfft as f64;
    let nyq = fs / 2.0;
    let grid = log_grid((4.0 * bin).max(10.0), nyq * 0.999, OUTPUT_PER_OCTAVE);
    let levels: Vec<f64> = match smoothing {
        None => grid
            .iter()
            .map(|&f| {
                let p = f / bin;
                let i = p.floor() as usize;
                let t = p - i as f64;
                let v = power[i] * (1.0 - t) + power[(i + 1).min(power.len() - 1)] * t;
                10.0 * v.max(1e-300).log10()
            })
            .collect(),
        Some(n) => {
            let mut prefix = vec![0.0; power.len() + 1];
            for (i, p) in power.iter().enumerate() {
                prefix[i + 1] = prefix[i] + p;
            }
            let half = 2f64.powf(1.0 / (2.0 * n.max(1) as f64));
            grid.iter()
                .map(|&f| {
                    let lo = ((f / half / bin).round() as usize).min(power.len() - 1);
                    let hi = ((f * half / bin).round() as usize).clamp(lo, power.len() - 1);
                    let v = (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64;
                    10.0 * v.max(1e-300).log10()
                })
                .collect()
        }
    };
    MagnitudeResponse::new(grid, levels)
}

/// [`spectrum_db`] normalised to 0 dB at 1 kHz.
pub fn magnitude_from_ir(
    ir: &ImpulseResponse,
    nfft: usize,
    smoothing: Option<u32>,
) -> Result<MagnitudeResponse> {
    Ok(spectrum_db(ir, nfft, smoothing)?.normalized())
}

/// `dut - ref` in dB on the part of the DUT grid both responses cover,
/// renormalised at 1 kHz.
pub fn subtract_reference(
    dut: &MagnitudeResponse,
    reference: &MagnitudeResponse,
) -> Result<MagnitudeResponse> {
    let (lo, hi) = dut.overlap(reference).ok_or(Error::DisjointGrids)?;
    let mut freqs = vec![lo];
    freqs.extend(dut.freqs_hz().iter().copied().filter(|&f| f > lo && f < hi));
    freqs.push(hi);
    let diff = MagnitudeResponse::from_fn(&freqs, |f| dut.at(f) - reference.at(f))?;
    Ok(diff.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_sweep(1000.0, 100.0, 2.0, 44_100).is_err());
        assert!(generate_sweep(0.0, 100.0, 2.0, 44_100).is_err());
        assert!(generate_sweep(20.0, 30_000.0, 2.0, 44_100).is_err());
        assert!(generate_sweep(20.0, 20_000.0, 0.5, 44_100).is_err());
    }

    #[test]
    fn instantaneous_frequency_follows_sweep_law() {
        let s = generate_sweep(100.0, 10_000.0, 5.0, 44_100).unwrap();
        assert!((s.instantaneous_frequency(5.0) / 10_000.0 - 1.0).abs() < 0.01);
        assert!((s.instantaneous_frequency(0.0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn self_deconvolution_peaks_at_zero_lag() {
        let s = generate_sweep(50.0, 20_000.0, 2.0, 44_100).unwrap();
        let ir = deconvolve(&s.samples, &s).unwrap();
        assert_eq!(ir.peak_index(), s.zero_lag());
    }

    #[test]
    fn unit_impulse_is_flat() {
        let mut x = vec![0.0; 4096];
        x[0] = 1.0;
        let ir = ImpulseResponse::from_samples(x, 44_100).unwrap();
        let m = magnitude_from_ir(&ir, 8192, None).unwrap();
        assert!(m.levels_db().iter().all(|l| l.abs() < 1e-9));
    }

    #[test]
    fn two_sample_averager_matches_cosine() {
        let ir = ImpulseResponse::from_samples(vec![0.5, 0.5], 44_100).unwrap();
        let m = magnitude_from_ir(&ir, 8192, None).unwrap();
        let oracle = |f: f64| 20.0 * (PI * f / 44_100.0).cos().log10();
        let expect = oracle(11_025.0) - oracle(1000.0);
        assert!((m.at(11_025.0) - expect).abs() < 0.01, "{}", m.at(11_025.0));
        assert!((expect + 2.988).abs() < 0.01);
    }

    #[test]
    fn subtracting_self_is_flat_and_disjoint_errors() {
        let a = MagnitudeResponse::from_fn(&log_grid(20.0, 20_000.0, 12), |f| f.ln()).unwrap();
        let d = subtract_reference(&a, &a).unwrap();
        assert!(d.levels_db().iter().all(|l| l.abs() < 1e-12));
        let b = MagnitudeResponse::flat(30_000.0, 40_000.0);
        assert!(matches!(subtract_reference(&a, &b), Err(Error::DisjointGrids)));
    }

    #[test]
    fn empty_ir_is_rejected() {
        assert!(ImpulseResponse::from_samples(vec![], 44_100).is_err());
    }
}
