//! Test signal generation. All levels are unweighted SPL in dB re 20 uPa,
//! rendered in pressure units (see [`crate::mic::PA_PER_UNIT`]).

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::convolve::{irfft, rfft};
use crate::error::{Error, Result};
use crate::mic::{rms_for_spl, sine_amplitude_for_spl};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampSource {
    Sine { freq_hz: f64 },
    Pink,
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StimulusKind {
    OctaveSine {
        freq_hz: f64,
        duration_s: f64,
        level_db: f64,
    },
    /// Silence, a whole-sample tone burst starting at phase zero, silence.
    Toneburst {
        freq_hz: f64,
        burst_s: f64,
        level_db: f64,
        lead_s: f64,
        tail_s: f64,
    },
    /// Steps from `start_db` to `end_db` holding each level for `dwell_s`.
    Ramp {
        source: RampSource,
        start_db: f64,
        end_db: f64,
        step_db: f64,
        dwell_s: f64,
    },
    Pink {
        duration_s: f64,
        level_db: f64,
    },
    White {
        duration_s: f64,
        level_db: f64,
    },
    /// Pink background with randomly timed louder events, similar in texture
    /// to a street recording.
    Bursty {
        duration_s: f64,
        background_db: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub kind: StimulusKind,
    pub seed: u64,
}

impl StimulusSpec {
    pub fn new(kind: StimulusKind) -> Self {
        Self { kind, seed: 1 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            StimulusKind::OctaveSine { freq_hz, .. } => format_freq(*freq_hz),
            StimulusKind::Toneburst { burst_s, .. } => format!("{} ms", trim(burst_s * 1000.0)),
            StimulusKind::Ramp { source, .. } => match source {
                RampSource::Sine { freq_hz } => format_freq(*freq_hz),
                RampSource::Pink => "pink".into(),
                RampSource::White => "white".into(),
            },
            StimulusKind::Pink { .. } => "pink".into(),
            StimulusKind::White { .. } => "white".into(),
            StimulusKind::Bursty { .. } => "bursty".into(),
            StimulusKind::File { path } => path.display().to_string(),
        }
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn format_freq(f: f64) -> String {
    if f >= 1000.0 {
        format!("{}k", trim(f / 1000.0))
    } else {
        trim(f)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidStimulus(format!("{name} must be positive, got {v}")))
    }
}

fn samples_for(duration_s: f64, rate: u32) -> usize {
    (duration_s * rate as f64).round() as usize
}

fn check_freq(f: f64, rate: u32) -> Result<()> {
    positive("frequency", f)?;
    if f >= rate as f64 / 2.0 {
        return Err(Error::InvalidStimulus(format!(
            "{f} Hz is at or above Nyquist for {rate} Hz"
        )));
    }
    Ok(())
}

pub fn gen_stimulus(spec: &StimulusSpec, rate: u32) -> Result<SampleBuffer> {
    if rate == 0 {
        return Err(Error::InvalidStimulus("sample rate must be positive".into()));
    }
    let fs = rate as f64;
    let samples = match &spec.kind {
        StimulusKind::OctaveSine {
            freq_hz,
            duration_s,
            level_db,
        } => {
            check_freq(*freq_hz, rate)?;
            positive("duration", *duration_s)?;
            let a = sine_amplitude_for_spl(*level_db);
            (0..samples_for(*duration_s, rate))
                .map(|n| a * (2.0 * PI * freq_hz * n as f64 / fs).sin())
                .collect()
        }
        StimulusKind::Toneburst {
            freq_hz,
            burst_s,
            level_db,
            lead_s,
            tail_s,
        } => {
            check_freq(*freq_hz, rate)?;
            positive("burst duration", *burst_s)?;
            if *lead_s < 0.0 || *tail_s < 0.0 {
                return Err(Error::InvalidStimulus("negative padding".into()));
            }
            let a = sine_amplitude_for_spl(*level_db);
            let burst = samples_for(*burst_s, rate);
            let mut x = vec![0.0; samples_for(*lead_s, rate)];
            x.extend((0..burst).map(|n| a * (2.0 * PI * freq_hz * n as f64 / fs).sin()));
            x.resize(x.len() + samples_for(*tail_s, rate), 0.0);
            x
        }
        StimulusKind::Ramp {
            source,
            start_db,
            end_db,
            step_db,
            dwell_s,
        } => {
            positive("dwell", *dwell_s)?;
            positive("step", *step_db)?;
            let levels = ramp_levels(*start_db, *end_db, *step_db);
            let dwell = samples_for(*dwell_s, rate);
            let total = dwell * levels.len();
            let unit: Vec<f64> = match source {
                RampSource::Sine { freq_hz } => {
                    check_freq(*freq_hz, rate)?;
                    let a = sine_amplitude_for_spl(0.0);
                    (0..total)
                        .map(|n| a * (2.0 * PI * freq_hz * n as f64 / fs).sin())
                        .collect()
                }
                RampSource::Pink => coloured_noise(total, spec.seed, rate, true, rms_for_spl(0.0)),
                RampSource::White => coloured_noise(total, spec.seed, rate, false, rms_for_spl(0.0)),
            };
            unit.chunks(dwell)
                .zip(&levels)
                .flat_map(|(c, l)| {
                    let g = 10f64.powf(l / 20.0);
                    c.iter().map(move |v| v * g)
                })
                .collect()
        }
        StimulusKind::Pink {
            duration_s,
            level_db,
        } => {
            positive("duration", *duration_s)?;
            coloured_noise(samples_for(*duration_s, rate), spec.seed, rate, true, rms_for_spl(*level_db))
        }
        StimulusKind::White {
            duration_s,
            level_db,
        } => {
            positive("duration", *duration_s)?;
            coloured_noise(samples_for(*duration_s, rate), spec.seed, rate, false, rms_for_spl(*level_db))
        }
        StimulusKind::Bursty {
            duration_s,
            background_db,
        } => {
            positive("duration", *duration_s)?;
            bursty(*duration_s, *background_db, spec.seed, rate)
        }
        StimulusKind::File { path } => {
            let b = SampleBuffer::read_wav(path)?;
            if b.sample_rate_hz() != rate {
                return Err(Error::RateMismatch {
                    buffer: b.sample_rate_hz(),
                    filter: rate,
                });
            }
            return Ok(b);
        }
    };
    SampleBuffer::new(samples, rate)
}

/// Levels visited by a ramp, inclusive of both ends.
pub fn ramp_levels(start_db: f64, end_db: f64, step_db: f64) -> Vec<f64> {
    let n = ((end_db - start_db) / step_db).round().max(0.0) as usize;
    (0..=n).map(|i| start_db + i as f64 * step_db).collect()
}

const STIMULUS_STREAM: u64 = 1;

/// Gaussian noise with a white or 1/f power spectrum, scaled to `rms`.
/// DC is removed; the spectrum is shaped in one FFT pass.
pub fn coloured_noise(n: usize, seed: u64, rate: u32, pink: bool, rms: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    // Separate stream so stimulus noise never repeats the microphone's
    // self-noise sequence for the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STIMULUS_STREAM);
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nfft = n.next_power_of_two();
    let bin = rate as f64 / nfft as f64;
    let shaped: Vec<Complex64> = rfft(&white, nfft)
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            if k == 0 {
                Complex64::new(0.0, 0.0)
            } else if pink {
                c / (k as f64 * bin).sqrt()
            } else {
                c
            }
        })
        .collect();
    let mut x = irfft(&shaped, nfft);
    x.truncate(n);
    let mean = x.iter().sum::<f64>() / n as f64;
    let cur = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let g = if cur > 0.0 { rms / cur } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * g);
    x
}

fn bursty(duration_s: f64, background_db: f64, seed: u64, rate: u32) -> Vec<f64> {
    let n = samples_for(duration_s, rate);
    let fs = rate as f64;
    let mut x = coloured_noise(n, seed, rate, true, rms_for_spl(background_db));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0b5);
    let mut t = rng.gen_range(0.5..2.0);
    while t < duration_s {
        let len = rng.gen_range(0.3..3.0);
        let rise: f64 = rng.gen_range(6.0..30.0);
        let peak = 10f64.powf(rise / 20.0) - 1.0;
        let tone = rng.gen_bool(0.4);
        let freq = rng.gen_range(200.0..3000.0);
        let start = (t * fs) as usize;
        let end = ((t + len) * fs).min(n as f64) as usize;
        let span = (end - start).max(1) as f64;
        let ev_noise = coloured_noise(end - start, rng.gen(), rate, true, rms_for_spl(background_db));
        for (i, k) in (start..end).enumerate() {
            let env = (PI * i as f64 / span).sin().powf(0.5);
            let src = if tone {
                sine_amplitude_for_spl(background_db) * (2.0 * PI * freq * k as f64 / fs).sin()
            } else {
                ev_noise[i]
            };
            x[k] += peak * env * src;
        }
        t += len + rng.gen_range(0.5..4.0);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toneburst_has_whole_cycles() {
        let spec = StimulusSpec::new(StimulusKind::Toneburst {
            freq_hz: 4000.0,
            burst_s: 0.2,
            level_db: 94.0,
            lead_s: 0.0,
            tail_s: 0.0,
        });
        let b = gen_stimulus(&spec, 44_100).unwrap();
        assert_eq!(b.len(), 8820);
        // 800 cycles: 1600 sign changes including the final return to zero.
        let crossings = b
            .samples()
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count();
        assert!((1598..=1600).contains(&crossings), "{crossings}");
        assert_eq!(b.samples()[0], 0.0);
        assert_eq!(4000.0 * 0.2, 800.0);
    }

    #[test]
    fn ramp_levels_are_inclusive() {
        let l = ramp_levels(20.0, 94.0, 1.0);
        assert_eq!(l.len(), 75);
        assert_eq!(*l.last().unwrap(), 94.0);
    }

    #[test]
    fn noise_is_seeded() {
        let a = coloured_noise(1000, 3, 44_100, true, 0.1);
        let b = coloured_noise(1000, 3, 44_100, true, 0.1);
        let c = coloured_noise(1000, 4, 44_100, true, 0.1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let bad = StimulusSpec::new(StimulusKind::OctaveSine {
            freq_hz: 30_000.0,
            duration_s: 1.0,
            level_db: 94.0,
        });
        assert!(gen_stimulus(&bad, 44_100).is_err());
        let bad = StimulusSpec::new(StimulusKind::Pink {
            duration_s: -1.0,
            level_db: 94.0,
        });
        assert!(gen_stimulus(&bad, 44_100).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(format_freq(31.5), "31.5");
        assert_eq!(format_freq(8000.0), "8k");
        let s = StimulusSpec::new(StimulusKind::Toneburst {
            freq_hz: 4000.0,
            burst_s: 0.00025,
            level_db: 94.0,
            lead_s: 0.0,
            tail_s: 0.0,
        });
        assert_eq!(s.describe(), "0.25 ms");
    }
}
