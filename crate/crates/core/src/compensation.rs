//! Microphone response compensation: ensemble averaging, a regularized
//! linear-phase inverse FIR and streaming application ahead of the meter.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::convolve::{fir_response, irfft, AlignedFir};
use crate::error::{Error, Result};
use crate::response::{log_grid, MagnitudeResponse};

pub const DEFAULT_TAPS: usize = 8191;
pub const MIN_TAPS: usize = 1024;

/// (low full cut, low flat, high flat, high full cut) in Hz.
pub const DEFAULT_TAPER_BAND: [f64; 4] = [20.0, 30.0, 16_000.0, 20_000.0];

/// Largest allowed deviation between the designed filter and its target
/// inside the flat band.
pub const DESIGN_TOLERANCE_DB: f64 = 1.0;

const TUKEY_ALPHA: f64 = 0.5;
const MIN_DESIGN_FFT: usize = 65_536;
const GRID_PER_OCTAVE: usize = 48;
const CFIR_MAGIC: &[u8; 4] = b"CFIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnsembleStats {
    pub max_pairwise_diff_db: f64,
    pub mean_std_db: f64,
    pub n: usize,
}

/// Pointwise dB mean of `responses` on a shared log-spaced grid covering the
/// overlap of their ranges. Each input is normalised at 1 kHz first.
pub fn average_responses(
    responses: &[MagnitudeResponse],
) -> Result<(MagnitudeResponse, ResponseEnsembleStats)> {
    if responses.len() < 2 {
        return Err(Error::TooFewResponses {
            need: 2,
            got: responses.len(),
        });
    }
    let lo = responses.iter().map(|r| r.f_min()).fold(f64::MIN, f64::max);
    let hi = responses.iter().map(|r| r.f_max()).fold(f64::MAX, f64::min);
    if !(lo < hi) {
        return Err(Error::DisjointGrids);
    }
    let grid = log_grid(lo, hi, GRID_PER_OCTAVE);
    let curves: Vec<Vec<f64>> = responses
        .iter()
        .map(|r| {
            let r = r.normalized();
            grid.iter().map(|&f| r.at(f)).collect()
        })
        .collect();
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(grid.len());
    let (mut max_diff, mut std_sum) = (0.0f64, 0.0);
    for i in 0..grid.len() {
        let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
        let m = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        std_sum += var.sqrt();
        let (cmin, cmax) = col
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        max_diff = max_diff.max(cmax - cmin);
        mean.push(m);
    }
    let avg = MagnitudeResponse::new(grid.clone(), mean)?;
    Ok((
        avg,
        ResponseEnsembleStats {
            max_pairwise_diff_db: max_diff,
            mean_std_db: std_sum / grid.len() as f64,
            n: responses.len(),
        },
    ))
}

/// Raised-cosine (in log-frequency) weight that is 0 outside the full-cut
/// corners and 1 between the flat corners.
pub fn taper_weight(f: f64, band: [f64; 4]) -> f64 {
    let [lc, lf, hf, hc] = band;
    let ramp = |x: f64, a: f64, b: f64| {
        let t = ((x / a).ln() / (b / a).ln()).clamp(0.0, 1.0);
        0.5 - 0.5 * (PI * t).cos()
    };
    if f <= lc || f >= hc {
        0.0
    } else if f < lf {
        ramp(f, lc, lf)
    } else if f <= hf {
        1.0
    } else {
        1.0 - ramp(f, hf, hc)
    }
}

/// Target inverse response in dB: the negated, 1 kHz-normalised average,
/// faded to 0 dB at the band edges.
pub fn inverse_target_db(avg: &MagnitudeResponse, band: [f64; 4], f: f64) -> f64 {
    let w = taper_weight(f, band);
    if w == 0.0 {
        0.0
    } else {
        -w * (avg.at(f) - avg.at(avg.ref_freq_hz()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationFilter {
    taps: Vec<f64>,
    group_delay_samples: usize,
    design_rate_hz: u32,
    taper_band: Option<[f64; 4]>,
}

pub fn design_regularized_inverse(
    avg: &MagnitudeResponse,
    n_taps: usize,
    taper_band: [f64; 4],
    sample_rate_hz: u32,
) -> Result<CompensationFilter> {
    if n_taps < MIN_TAPS {
        return Err(Error::TooFewTaps {
            got: n_taps,
            min: MIN_TAPS,
        });
    }
    let n_taps = if n_taps % 2 == 0 { n_taps - 1 } else { n_taps };
    let [lc, lf, hf, hc] = taper_band;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let ordered = lc > 0.0 && lc < lf && lf < hf && hf < hc && hc <= nyquist;
    if !ordered || !avg.covers(lc) || !avg.covers(hc) {
        return Err(Error::TaperOutsideGrid(taper_band));
    }

    let nfft = MIN_DESIGN_FFT.max((4 * n_taps).next_power_of_two());
    let fs = sample_rate_hz as f64;
    let spectrum: Vec<Complex64> = (0..=nfft / 2)
        .map(|k| {
            let f = k as f64 * fs / nfft as f64;
            Complex64::new(10f64.powf(inverse_target_db(avg, taper_band, f) / 20.0), 0.0)
        })
        .collect();
    let h = irfft(&spectrum, nfft);
    let m = (n_taps - 1) / 2;
    let mut taps = vec![0.0; n_taps];
    taps[m] = h[0];
    for i in 1..=m {
        // Zero-phase impulse is even; average the two halves so the
        // coefficients are symmetric bit for bit.
        let v = 0.5 * (h[i] + h[nfft - i]) * tukey(m + i, n_taps);
        taps[m + i] = v;
        taps[m - i] = v;
    }
    taps[m] *= tukey(m, n_taps);

    let filter = CompensationFilter {
        taps,
        group_delay_samples: m,
        design_rate_hz: sample_rate_hz,
        taper_band: Some(taper_band),
    };
    let (err, worst) = filter.target_error(avg, taper_band);
    if err > DESIGN_TOLERANCE_DB {
        return Err(Error::FlatnessNotMet {
            achieved_error_db: err,
            worst_freq_hz: worst,
            limit_db: DESIGN_TOLERANCE_DB,
        });
    }
    Ok(filter)
}

fn tukey(i: usize, n: usize) -> f64 {
    let x = i as f64 / (n - 1) as f64;
    let a = TUKEY_ALPHA;
    if x < a / 2.0 {
        0.5 * (1.0 - (2.0 * PI * x / a).cos())
    } else if x > 1.0 - a / 2.0 {
        0.5 * (1.0 - (2.0 * PI * (1.0 - x) / a).cos())
    } else {
        1.0
    }
}

impl CompensationFilter {
    /// Wraps existing coefficients. The length must be odd.
    pub fn from_taps(taps: Vec<f64>, design_rate_hz: u32) -> Result<Self> {
        if taps.is_empty() || taps.len() % 2 == 0 {
            return Err(Error::InvalidFilterFile(format!(
                "tap count must be odd, got {}",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidFilterFile("non-finite coefficient".into()));
        }
        Ok(Self {
            group_delay_samples: (taps.len() - 1) / 2,
            taps,
            design_rate_hz,
            taper_band: None,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn group_delay_samples(&self) -> usize {
        self.group_delay_samples
    }

    pub fn design_rate_hz(&self) -> u32 {
        self.design_rate_hz
    }

    pub fn taper_band(&self) -> Option<[f64; 4]> {
        self.taper_band
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.taps.len();
        (0..n / 2).all(|i| self.taps[i] == self.taps[n - 1 - i])
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        let h = fir_response(&self.taps, freq_hz, self.design_rate_hz as f64);
        20.0 * h.norm().max(1e-30).log10()
    }

    /// Worst deviation from the design target over the flat band, and where.
    pub fn target_error(&self, avg: &MagnitudeResponse, band: [f64; 4]) -> (f64, f64) {
        log_grid(band[1], band[2], GRID_PER_OCTAVE)
            .into_iter()
            .map(|f| {
                let e = (self.magnitude_db(f) - inverse_target_db(avg, band, f)).abs();
                (e, f)
            })
            .fold((0.0, band[1]), |acc, x| if x.0 > acc.0 { x } else { acc })
    }

    pub fn stream(&self) -> CompensationStream {
        CompensationStream {
            fir: AlignedFir::new(&self.taps, self.group_delay_samples),
        }
    }

    /// Little-endian "CFIR", u32 tap count, u32 rate, then f64 taps.
    pub fn write_cfir<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CFIR_MAGIC)?;
        w.write_all(&(self.taps.len() as u32).to_le_bytes())?;
        w.write_all(&self.design_rate_hz.to_le_bytes())?;
        for t in &self.taps {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cfir<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| Error::InvalidFilterFile("truncated header".into()))?;
        if &head[..4] != CFIR_MAGIC {
            return Err(Error::InvalidFilterFile("bad magic".into()));
        }
        let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let rate = u32::from_le_bytes(head[8..12].try_into().unwrap());
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n * 8 {
            return Err(Error::InvalidFilterFile(format!(
                "expected {} coefficient bytes, found {}",
                n * 8,
                body.len()
            )));
        }
        let taps = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_taps(taps, rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cfir(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_cfir(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["index", "tap"])?;
        for (i, t) in self.taps.iter().enumerate() {
            wr.write_record([i.to_string(), format!("{t:.17e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Streaming compensation with the group delay removed: output sample `n`
/// corresponds to input sample `n`.
pub struct CompensationStream {
    fir: AlignedFir,
}

impl CompensationStream {
    pub fn process(&mut self, block: &[f64]) -> Vec<f64> {
        self.fir.process(block)
    }

    pub fn process_into(&mut self, block: &[f64], out: &mut Vec<f64>) {
        self.fir.process_into(block, out)
    }

    pub fn finish(&mut self) -> Vec<f64> {
        self.fir.finish()
    }
}

pub fn apply_compensation(
    buffer: &SampleBuffer,
    filter: &CompensationFilter,
) -> Result<SampleBuffer> {
    if buffer.sample_rate_hz() != filter.design_rate_hz {
        return Err(Error::RateMismatch {
            buffer: buffer.sample_rate_hz(),
            filter: filter.design_rate_hz,
        });
    }
    let mut s = filter.stream();
    let mut out = s.process(buffer.samples());
    out.extend(s.finish());
    Ok(buffer.derive(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mic::default_mic_curve;

    #[test]
    fn taper_weight_shape() {
        let b = DEFAULT_TAPER_BAND;
        assert_eq!(taper_weight(10.0, b), 0.0);
        assert_eq!(taper_weight(20.0, b), 0.0);
        assert_eq!(taper_weight(1000.0, b), 1.0);
        assert_eq!(taper_weight(20_000.0, b), 0.0);
        let mid = taper_weight((20.0f64 * 30.0).sqrt(), b);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flat_average_gives_delayed_impulse() {
        let flat = MagnitudeResponse::flat(10.0, 22_050.0);
        let f = design_regularized_inverse(&flat, 2047, DEFAULT_TAPER_BAND, 44_100).unwrap();
        let c = f.group_delay_samples();
        assert!((f.taps()[c] - 1.0).abs() < 1e-6);
        assert!(f
            .taps()
            .iter()
            .enumerate()
            .all(|(i, t)| i == c || t.abs() < 1e-4));
    }

    #[test]
    fn even_tap_count_drops_to_odd() {
        let f = design_regularized_inverse(&default_mic_curve(), 8192, DEFAULT_TAPER_BAND, 44_100)
            .unwrap();
        assert_eq!(f.len(), 8191);
        assert_eq!(f.group_delay_samples(), 4095);
        assert!(f.is_symmetric());
    }

    #[test]
    fn rejects_small_filters_and_bad_bands() {
        let c = default_mic_curve();
        assert!(matches!(
            design_regularized_inverse(&c, 512, DEFAULT_TAPER_BAND, 44_100),
            Err(Error::TooFewTaps { .. })
        ));
        assert!(matches!(
            design_regularized_inverse(&c, 2047, [5.0, 30.0, 16e3, 20e3], 44_100),
            Err(Error::TaperOutsideGrid(_))
        ));
    }

    #[test]
    fn ensemble_of_offset_pair() {
        let a = MagnitudeResponse::flat(20.0, 20_000.0).map(|_, _| 1.0);
        let b = MagnitudeResponse::flat(20.0, 20_000.0).map(|_, _| -1.0);
        // Normalisation at 1 kHz removes a pure offset, so tilt one curve.
        let a = a.map(|f, l| if f > 1000.0 { l } else { l - 2.0 });
        let (avg, stats) = average_responses(&[a, b]).unwrap();
        assert!(stats.max_pairwise_diff_db <= 2.0 + 1e-9);
        assert!(avg.at(1000.0).abs() < 1e-9);
        assert!(matches!(
            average_responses(&[MagnitudeResponse::flat(20.0, 100.0)]),
            Err(Error::TooFewResponses { .. })
        ));
        assert!(matches!(
            average_responses(&[
                MagnitudeResponse::flat(20.0, 100.0),
                MagnitudeResponse::flat(200.0, 1000.0)
            ]),
            Err(Error::DisjointGrids)
        ));
    }

    #[test]
    fn cfir_round_trip_and_corruption() {
        let f = CompensationFilter::from_taps(vec![0.25, 0.5, 0.25], 48_000).unwrap();
        let mut bytes = Vec::new();
        f.write_cfir(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + 24);
        let back = CompensationFilter::read_cfir(&bytes[..]).unwrap();
        assert_eq!(back.taps(), f.taps());
        assert_eq!(back.design_rate_hz(), 48_000);
        bytes[0] = b'X';
        assert!(CompensationFilter::read_cfir(&bytes[..]).is_err());
        assert!(CompensationFilter::read_cfir(&bytes[..10]).is_err());
    }

    #[test]
    fn impulse_in_gives_aligned_taps() {
        let f = CompensationFilter::from_taps(vec![0.1, 0.2, 0.4, 0.2, 0.1], 44_100).unwrap();
        let mut x = vec![0.0; 16];
        x[5] = 1.0;
        let y = apply_compensation(&SampleBuffer::new(x, 44_100).unwrap(), &f).unwrap();
        assert_eq!(y.len(), 16);
        let expect = [0.0, 0.0, 0.0, 0.1, 0.2, 0.4, 0.2, 0.1, 0.0];
        for (i, e) in expect.iter().enumerate() {
            assert!((y.samples()[i] - e).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let f = CompensationFilter::from_taps(vec![1.0], 48_000).unwrap();
        assert!(matches!(
            apply_compensation(&SampleBuffer::silence(4, 44_100), &f),
            Err(Error::RateMismatch { .. })
        ));
    }
}
