//! Frequency weighting filters.
//!
//! The A curve is realised as three biquads: the four low-frequency poles
//! (two at f1, one each at f2 and f3, with four zeros at DC) go through the
//! bilinear transform, which is accurate far below Nyquist. The double pole at
//! f4 sits close enough to Nyquist at 44.1 kHz that the bilinear warp costs
//! more than half a decibel at 8 kHz, so that pair is realised as a
//! magnitude-matched second-order low-pass instead (impulse-invariant poles,
//! numerator fitted to the analog magnitude at DC, at f4 and at Nyquist).
//! The cascade is then renormalised to exactly 0 dB at 1 kHz.

use std::f64::consts::PI;

use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::error::{Error, Result};

/// Analog pole frequencies of the A curve in Hz (f1, f2, f3, f4).
pub const A_POLE_FREQS_HZ: [f64; 4] = [20.598997, 107.65265, 737.86223, 12194.217];

pub const MIN_DESIGN_RATE_HZ: u32 = 32_000;

const NORMALISATION_FREQ_HZ: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightingKind {
    A,
    Z,
}

impl std::fmt::Display for WeightingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightingKind::A => f.write_str("A"),
            WeightingKind::Z => f.write_str("Z"),
        }
    }
}

impl std::str::FromStr for WeightingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(WeightingKind::A),
            "Z" => Ok(WeightingKind::Z),
            other => Err(format!("unknown weighting '{other}' (expected A or Z)")),
        }
    }
}

/// Normalised second-order section, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z1 * self.a[0] + z2 * self.a[1];
        num / den
    }

    /// Largest pole radius.
    pub fn pole_radius(&self) -> f64 {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let r = disc.sqrt();
            ((-a1 + r) / 2.0).abs().max(((-a1 - r) / 2.0).abs())
        } else {
            a2.sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightingFilter {
    kind: WeightingKind,
    sections: Vec<Biquad>,
    gain: f64,
    design_rate_hz: u32,
}

pub fn design_frequency_weighting(
    kind: WeightingKind,
    sample_rate_hz: u32,
) -> Result<WeightingFilter> {
    if sample_rate_hz < MIN_DESIGN_RATE_HZ {
        return Err(Error::UnsupportedRate {
            rate: sample_rate_hz,
            min: MIN_DESIGN_RATE_HZ,
        });
    }
    let sections = match kind {
        WeightingKind::Z => Vec::new(),
        WeightingKind::A => a_sections(sample_rate_hz as f64),
    };
    let mut filter = WeightingFilter {
        kind,
        sections,
        gain: 1.0,
        design_rate_hz: sample_rate_hz,
    };
    filter.gain = 1.0 / filter.response(NORMALISATION_FREQ_HZ).norm();
    Ok(filter)
}

fn a_sections(fs: f64) -> Vec<Biquad> {
    let [f1, f2, f3, f4] = A_POLE_FREQS_HZ;
    let k = 2.0 * fs;
    let bilinear_pole = |f: f64| {
        let w = 2.0 * PI * f;
        ((k - w) / (k + w), k + w)
    };
    let (p1, d1) = bilinear_pole(f1);
    let (p2, d2) = bilinear_pole(f2);
    let (p3, d3) = bilinear_pole(f3);
    let g1 = k * k / (d1 * d1);
    let g23 = k * k / (d2 * d3);
    vec![
        Biquad {
            b: [g1, -2.0 * g1, g1],
            a: [-2.0 * p1, p1 * p1],
        },
        Biquad {
            b: [g23, -2.0 * g23, g23],
            a: [-(p2 + p3), p2 * p3],
        },
        matched_lowpass(f4, 0.5, fs),
    ]
}

/// Second-order low-pass whose magnitude matches `w0^2 / (s^2 + s w0/Q + w0^2)`
/// at DC, at `f0` and at Nyquist.
fn matched_lowpass(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * PI * f0 / fs;
    let zeta = 1.0 / (2.0 * q);
    let decay = (-zeta * w0).exp();
    let a1 = if zeta < 1.0 {
        -2.0 * decay * ((1.0 - zeta * zeta).sqrt() * w0).cos()
    } else if zeta == 1.0 {
        -2.0 * decay
    } else {
        -2.0 * decay * ((zeta * zeta - 1.0).sqrt() * w0).cosh()
    };
    let a2 = (-2.0 * zeta * w0).exp();

    let big_a0 = (1.0 + a1 + a2).powi(2);
    let big_a1 = (1.0 - a1 + a2).powi(2);
    let big_a2 = -4.0 * a2;
    let s = (w0 / 2.0).sin().powi(2);
    let (phi0, phi1) = (1.0 - s, s);
    let phi2 = 4.0 * phi0 * phi1;
    let r1 = (big_a0 * phi0 + big_a1 * phi1 + big_a2 * phi2) * q * q;
    let big_b0 = big_a0;
    let big_b1 = (r1 - big_b0 * phi0) / phi1;
    let b0 = 0.5 * (big_b0.sqrt() + big_b1.max(0.0).sqrt());
    let b1 = big_b0.sqrt() - b0;
    Biquad {
        b: [b0, b1, 0.0],
        a: [a1, a2],
    }
}

impl WeightingFilter {
    pub fn kind(&self) -> WeightingKind {
        self.kind
    }

    pub fn design_rate_hz(&self) -> u32 {
        self.design_rate_hz
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let fs = self.design_rate_hz as f64;
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, s| {
                acc * s.response(freq_hz, fs)
            })
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(|s| s.pole_radius() < 1.0)
    }

    pub fn state(&self) -> WeightingState<'_> {
        WeightingState {
            filter: self,
            z: vec![[0.0; 2]; self.sections.len()],
        }
    }

    /// First `len` samples of the impulse response.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut x = vec![0.0; len];
        if len > 0 {
            x[0] = 1.0;
        }
        self.state().process(&mut x);
        x
    }

    /// Output power for unit-variance white input: the sum of squared impulse
    /// response samples.
    pub fn white_noise_power_gain(&self) -> f64 {
        let n = (self.design_rate_hz as usize) * 2;
        self.impulse_response(n).iter().map(|h| h * h).sum()
    }
}

/// Running state for streaming a signal through a [`WeightingFilter`].
pub struct WeightingState<'a> {
    filter: &'a WeightingFilter,
    z: Vec<[f64; 2]>,
}

impl WeightingState<'_> {
    /// Filters `block` in place (transposed direct form II).
    pub fn process(&mut self, block: &mut [f64]) {
        let g = self.filter.gain;
        for x in block.iter_mut() {
            let mut v = *x * g;
            for (s, z) in self.filter.sections.iter().zip(self.z.iter_mut()) {
                let y = s.b[0] * v + z[0];
                z[0] = s.b[1] * v - s.a[0] * y + z[1];
                z[1] = s.b[2] * v - s.a[1] * y;
                v = y;
            }
            *x = v;
        }
    }
}

pub fn apply_filter(buffer: &SampleBuffer, filter: &WeightingFilter) -> Result<SampleBuffer> {
    if buffer.sample_rate_hz() != filter.design_rate_hz {
        return Err(Error::RateMismatch {
            buffer: buffer.sample_rate_hz(),
            filter: filter.design_rate_hz,
        });
    }
    let mut out = buffer.samples().to_vec();
    filter.state().process(&mut out);
    Ok(buffer.derive(out))
}
