//! The virtual test battery. Every test takes calibrated pipelines and a
//! seed and returns a [`TestReport`]; identical inputs give identical reports.

use std::f64::consts::PI;
use std::thread;

use serde::{Deserialize, Serialize};

use super::history::compare_time_histories;
use super::pipeline::Pipeline;
use super::report::{ReportRow, TestReport};
use super::stimulus::{gen_stimulus, ramp_levels, RampSource, StimulusKind, StimulusSpec};
use super::tolerance::{
    frequency_tolerance, toneburst_bounds, toneburst_oracle_db, Bounds, LINEARITY_BOUND_DB,
    OCTAVE_FREQS_HZ, TONEBURST_DURATIONS_S,
};
use crate::error::{Error, Result};
use crate::meter::FLOOR_DB;
use crate::mic::{derived_metrics, sine_amplitude_for_spl};

pub const STEADY_TONE_S: f64 = 20.0;
pub const TEST_LEVEL_DB: f64 = 94.0;
pub const TONEBURST_FREQ_HZ: f64 = 4000.0;
pub const TONEBURST_REPEATS: usize = 4;
pub const RAMP_START_DB: f64 = 20.0;
pub const RAMP_STEP_DB: f64 = 1.0;
pub const RAMP_DWELL_S: f64 = 2.0;
pub const KNEE_BOUND_SINE_DB: f64 = 1.0;
pub const KNEE_BOUND_NOISE_DB: f64 = 1.5;
pub const STABILITY_DURATION_S: f64 = 1800.0;
pub const STABILITY_BOUND_DB: f64 = 0.2;
pub const SELF_NOISE_DURATION_S: f64 = 60.0;
pub const HISTORY_DURATION_S: f64 = 60.0;
pub const MIN_R_SQUARED: f64 = 0.97;
pub const MAX_MEAN_ABS_DIFF_DB: f64 = 0.5;

fn require_calibrated(p: &Pipeline) -> Result<()> {
    if p.is_calibrated() {
        Ok(())
    } else {
        Err(Error::Uncalibrated(p.name().to_string()))
    }
}

/// Runs `f` over `items` on scoped threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("test worker panicked"))
            .collect()
    })
}

/// Leq of the second half of `spec` through `p`.
fn steady_level(p: &Pipeline, spec: &StimulusSpec) -> Result<f64> {
    let x = gen_stimulus(spec, p.sample_rate_hz())?;
    let n = x.len();
    Ok(p.run(&x, &[(n / 2, n)])?.window_leq_db[0])
}

pub fn test_frequency_weighting(dut: &Pipeline, reference: &Pipeline, seed: u64) -> Result<TestReport> {
    require_calibrated(dut)?;
    require_calibrated(reference)?;
    let mut specs: Vec<(StimulusSpec, Option<Bounds>)> = OCTAVE_FREQS_HZ
        .iter()
        .map(|&f| {
            let spec = StimulusSpec::new(StimulusKind::OctaveSine {
                freq_hz: f,
                duration_s: STEADY_TONE_S,
                level_db: TEST_LEVEL_DB,
            });
            let b = frequency_tolerance(f).and_then(|t| t.adjusted().ok());
            (spec, b)
        })
        .collect();
    for kind in [
        StimulusKind::Pink {
            duration_s: STEADY_TONE_S,
            level_db: TEST_LEVEL_DB,
        },
        StimulusKind::White {
            duration_s: STEADY_TONE_S,
            level_db: TEST_LEVEL_DB,
        },
    ] {
        specs.push((StimulusSpec::new(kind).with_seed(seed), None));
    }
    let rows = par_map(&specs, |(spec, bounds)| {
        let r = steady_level(reference, spec)?;
        let d = steady_level(dut, spec)?;
        Ok(match bounds {
            Some(b) => ReportRow::checked(spec.describe(), r, d, *b),
            None => ReportRow::info(spec.describe(), Some(r), d),
        })
    })?;
    Ok(TestReport::new("frequency_weighting", rows, seed, dut.sample_rate_hz()))
}

/// Per-duration toneburst result: median max-hold minus steady reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneburstPoint {
    pub duration_s: f64,
    pub oracle_db: f64,
    pub measured_db: f64,
}

pub fn toneburst_points(p: &Pipeline, seed: u64) -> Result<Vec<ToneburstPoint>> {
    require_calibrated(p)?;
    if !p.has_max_hold() {
        return Err(Error::MissingMaxHold(p.name().to_string()));
    }
    let rate = p.sample_rate_hz();
    let steady_spec = StimulusSpec::new(StimulusKind::OctaveSine {
        freq_hz: TONEBURST_FREQ_HZ,
        duration_s: 2.0,
        level_db: TEST_LEVEL_DB,
    });
    let steady_x = gen_stimulus(&steady_spec, rate)?;
    let steady_run = p.clone().with_seed(seed).run(&steady_x, &[])?;
    let steady = steady_run
        .series
        .mean_db(1.0, f64::INFINITY)
        .ok_or_else(|| Error::InvalidStimulus("steady tone too short".into()))?;
    let tau = p.time_weighting().tau_s;
    par_map(&TONEBURST_DURATIONS_S, |&t| {
        let spec = StimulusSpec::new(StimulusKind::Toneburst {
            freq_hz: TONEBURST_FREQ_HZ,
            burst_s: t,
            level_db: TEST_LEVEL_DB,
            lead_s: 0.25,
            tail_s: 0.5,
        });
        let x = gen_stimulus(&spec, rate)?;
        let mut deltas = (0..TONEBURST_REPEATS)
            .map(|r| {
                let run = p.clone().with_seed(seed.wrapping_add(1 + r as u64)).run(&x, &[])?;
                Ok(run.series.max_level_db - steady)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ToneburstPoint {
            duration_s: t,
            oracle_db: toneburst_oracle_db(t, tau),
            measured_db: median(&mut deltas),
        })
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn test_toneburst(p: &Pipeline, seed: u64) -> Result<TestReport> {
    let rows = toneburst_points(p, seed)?
        .into_iter()
        .map(|pt| {
            let label = StimulusSpec::new(StimulusKind::Toneburst {
                freq_hz: TONEBURST_FREQ_HZ,
                burst_s: pt.duration_s,
                level_db: TEST_LEVEL_DB,
                lead_s: 0.0,
                tail_s: 0.0,
            })
            .describe();
            ReportRow::checked(label, pt.oracle_db, pt.measured_db, toneburst_bounds(pt.duration_s))
        })
        .collect();
    Ok(TestReport::new("toneburst", rows, seed, p.sample_rate_hz()))
}

/// One ramp of the linearity test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityCurve {
    pub stimulus: String,
    /// Input levels (unweighted dB).
    pub levels_db: Vec<f64>,
    /// Steady readings at each level (dBA).
    pub readings_dba: Vec<f64>,
    /// Reading minus input level at the top of the ramp.
    pub weighting_offset_db: f64,
    /// Lowest weighted input level from which every higher step deviates by
    /// no more than the bound.
    pub knee_dba: f64,
    pub oracle_knee_dba: f64,
}

impl LinearityCurve {
    /// Deviation of each step from a straight line through the top step.
    pub fn deviations_db(&self) -> Vec<f64> {
        self.levels_db
            .iter()
            .zip(&self.readings_dba)
            .map(|(l, r)| r - (l + self.weighting_offset_db))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub report: TestReport,
    pub curves: Vec<LinearityCurve>,
    pub noise_floor_dba: Option<f64>,
}

/// Reading predicted by energy addition of signal and noise floor.
pub fn linearity_oracle_dba(weighted_level_dba: f64, noise_floor_dba: f64) -> f64 {
    10.0 * (10f64.powf(weighted_level_dba / 10.0) + 10f64.powf(noise_floor_dba / 10.0)).log10()
}

/// Weighted level at which the anchored noise-sum deviation reaches `bound`.
fn oracle_knee(noise: Option<f64>, top_dba: f64, lowest_dba: f64, bound: f64) -> f64 {
    let Some(n) = noise else {
        return lowest_dba;
    };
    let dev = |l: f64| {
        (linearity_oracle_dba(l, n) - l) - (linearity_oracle_dba(top_dba, n) - top_dba)
    };
    if dev(lowest_dba) <= bound {
        return lowest_dba;
    }
    let (mut lo, mut hi) = (lowest_dba, top_dba);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if dev(mid) > bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Lowest level from which every higher step stays within `bound`. The
/// crossing between the first failing step and the step above it is
/// interpolated linearly.
fn knee_from(levels: &[f64], devs: &[f64], bound: f64) -> f64 {
    let mut i = levels.len() - 1;
    if devs[i].abs() > bound {
        return levels[i];
    }
    while i > 0 && devs[i - 1].abs() <= bound {
        i -= 1;
    }
    if i == 0 {
        return levels[0];
    }
    let (d0, d1) = (devs[i - 1].abs(), devs[i].abs());
    let frac = ((d0 - bound) / (d0 - d1)).clamp(0.0, 1.0);
    levels[i - 1] + frac * (levels[i] - levels[i - 1])
}

pub fn linearity_sources() -> Vec<RampSource> {
    let mut v: Vec<RampSource> = OCTAVE_FREQS_HZ
        .iter()
        .map(|&f| RampSource::Sine { freq_hz: f })
        .collect();
    v.push(RampSource::Pink);
    v.push(RampSource::White);
    v
}

pub fn test_level_linearity(p: &Pipeline, sources: &[RampSource], seed: u64) -> Result<LinearityReport> {
    require_calibrated(p)?;
    if p.mic().is_none() {
        return Err(Error::MissingNoiseModel(p.name().to_string()));
    }
    let rate = p.sample_rate_hz();
    let noise = p.expected_noise_floor_dba();
    let digital_floor = FLOOR_DB + p.calibration().map_or(0.0, |c| c.offset_db);
    let levels = ramp_levels(RAMP_START_DB, TEST_LEVEL_DB, RAMP_STEP_DB);
    let dwell = (RAMP_DWELL_S * rate as f64).round() as usize;
    let windows: Vec<(usize, usize)> = (0..levels.len())
        .map(|i| (i * dwell + dwell / 2, (i + 1) * dwell))
        .collect();
    let curves = par_map(sources, |src| {
        let spec = StimulusSpec::new(StimulusKind::Ramp {
            source: *src,
            start_db: RAMP_START_DB,
            end_db: TEST_LEVEL_DB,
            step_db: RAMP_STEP_DB,
            dwell_s: RAMP_DWELL_S,
        })
        .with_seed(seed);
        let x = gen_stimulus(&spec, rate)?;
        let readings = p.run(&x, &windows)?.window_leq_db;
        let top = levels.len() - 1;
        let offset = readings[top] - levels[top];
        let devs: Vec<f64> = levels
            .iter()
            .zip(&readings)
            .map(|(l, r)| r - (l + offset))
            .collect();
        let knee = knee_from(&levels, &devs, LINEARITY_BOUND_DB) + offset;
        // The top step carries a little noise too; remove it from the offset
        // before placing the oracle input levels.
        let clean_offset = match noise {
            Some(n) => {
                let clean = 10.0
                    * (10f64.powf(readings[top] / 10.0) - 10f64.powf(n / 10.0))
                        .max(1e-30)
                        .log10();
                clean - levels[top]
            }
            None => offset,
        };
        // Steps that land below the digital floor read as the sentinel, so
        // the lowest usable step is the first one above it.
        let lowest = levels
            .iter()
            .map(|l| l + clean_offset)
            .find(|&l| l > digital_floor)
            .unwrap_or(levels[top] + clean_offset);
        let oracle = oracle_knee(noise, levels[top] + clean_offset, lowest, LINEARITY_BOUND_DB);
        Ok(LinearityCurve {
            stimulus: spec.describe(),
            levels_db: levels.clone(),
            readings_dba: readings,
            weighting_offset_db: offset,
            knee_dba: knee,
            oracle_knee_dba: oracle,
        })
    })?;
    let rows = curves
        .iter()
        .zip(sources)
        .map(|(c, src)| {
            let b = match src {
                RampSource::Sine { .. } => KNEE_BOUND_SINE_DB,
                _ => KNEE_BOUND_NOISE_DB,
            };
            ReportRow::checked(c.stimulus.clone(), c.oracle_knee_dba, c.knee_dba, Bounds::symmetric(b))
        })
        .collect();
    Ok(LinearityReport {
        report: TestReport::new("level_linearity", rows, seed, rate),
        curves,
        noise_floor_dba: noise,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub start_mean_dba: f64,
    pub end_mean_dba: f64,
}

pub fn test_stability(p: &Pipeline, duration_s: f64, seed: u64) -> Result<(TestReport, StabilityResult)> {
    require_calibrated(p)?;
    if !(duration_s >= 8.0) {
        return Err(Error::InvalidStimulus(format!(
            "stability run must last at least 8 s, got {duration_s}"
        )));
    }
    let rate = p.sample_rate_hz();
    let fs = rate as f64;
    let a = sine_amplitude_for_spl(TEST_LEVEL_DB);
    let w = (duration_s / 2.0 - 1.0).min(59.0);
    let n = (duration_s * fs).round() as usize;
    // Sample index reduced modulo a whole number of tone cycles keeps the
    // phase argument small over long runs.
    let period = (rate / gcd(rate, 1000)) as usize;
    let out = p.clone().with_seed(seed).run_source(
        n,
        rate,
        |off, buf| {
            for (i, v) in buf.iter_mut().enumerate() {
                let k = off + i;
                *v = a * (2.0 * PI * 1000.0 * (k % period) as f64 / fs).sin();
            }
        },
        &[],
    )?;
    let s = &out.series;
    let start = s.mean_db(1.0, 1.0 + w).unwrap_or(f64::NAN);
    let end = s.mean_db(duration_s - w, duration_s).unwrap_or(f64::NAN);
    let rows = vec![
        ReportRow::info("first minute", None, start),
        ReportRow::info("last minute", None, end),
        ReportRow::checked("difference", 0.0, end - start, Bounds::symmetric(STABILITY_BOUND_DB)),
    ];
    Ok((
        TestReport::new("stability", rows, seed, rate),
        StabilityResult {
            start_mean_dba: start,
            end_mean_dba: end,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfNoiseResult {
    pub mean_dba: f64,
    pub max_dba: f64,
    pub min_dba: f64,
    pub std_db: f64,
}

pub fn test_self_noise(p: &Pipeline, duration_s: f64, seed: u64) -> Result<(TestReport, SelfNoiseResult)> {
    require_calibrated(p)?;
    if !(duration_s > 2.0) {
        return Err(Error::InvalidStimulus("self-noise run must exceed 2 s".into()));
    }
    let rate = p.sample_rate_hz();
    let n = (duration_s * rate as f64).round() as usize;
    let out = p
        .clone()
        .with_seed(seed)
        .run_source(n, rate, |_, buf| buf.fill(0.0), &[])?;
    let levels: Vec<f64> = out.series.window(1.0, f64::INFINITY).map(|r| r.level_db).collect();
    let k = levels.len() as f64;
    let mean = levels.iter().sum::<f64>() / k;
    let std = (levels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k).sqrt();
    let res = SelfNoiseResult {
        mean_dba: mean,
        max_dba: levels.iter().copied().fold(f64::MIN, f64::max),
        min_dba: levels.iter().copied().fold(f64::MAX, f64::min),
        std_db: std,
    };
    let expected = p.expected_noise_floor_dba();
    let mut rows = vec![ReportRow::checked(
        "mean",
        expected.unwrap_or(FLOOR_DB),
        mean,
        Bounds::symmetric(0.3),
    )];
    rows.push(ReportRow::info("max", None, res.max_dba));
    rows.push(ReportRow::info("min", None, res.min_dba));
    if let (Some(n), Some(m)) = (expected, p.mic()) {
        rows.push(ReportRow::limit("std", std, None, Some(0.2)));
        let dm = derived_metrics(&crate::mic::MicResponseModel {
            noise_floor_dba: n,
            ..m.clone()
        });
        rows.push(ReportRow::checked(
            "snr at 94",
            dm.snr_at_94_db,
            TEST_LEVEL_DB - mean,
            Bounds::symmetric(0.4),
        ));
        rows.push(ReportRow::checked(
            "dynamic range",
            dm.dynamic_range_db,
            m.overload_dba - mean,
            Bounds::symmetric(0.3),
        ));
    }
    Ok((TestReport::new("self_noise", rows, seed, rate), res))
}

pub fn test_time_history(
    dut: &Pipeline,
    reference: &Pipeline,
    duration_s: f64,
    seed: u64,
) -> Result<(TestReport, super::history::HistoryComparison)> {
    require_calibrated(dut)?;
    require_calibrated(reference)?;
    let spec = StimulusSpec::new(StimulusKind::Bursty {
        duration_s,
        background_db: 55.0,
    })
    .with_seed(seed);
    let x = gen_stimulus(&spec, dut.sample_rate_hz())?;
    let runs = par_map(&[reference, dut], |p| (*p).clone().with_seed(seed).run(&x, &[]))?;
    let c = compare_time_histories(&runs[0].series, &runs[1].series)?;
    let rows = vec![
        ReportRow::limit("r squared", c.r_squared, Some(MIN_R_SQUARED), None),
        ReportRow::limit("mean |diff|", c.mean_abs_diff, None, Some(MAX_MEAN_ABS_DIFF_DB)),
        ReportRow::info("mean diff", None, c.mean_diff),
        ReportRow::info("std diff", None, c.std_diff),
        ReportRow::info("min diff", None, c.min_diff),
        ReportRow::info("max diff", None, c.max_diff),
    ];
    Ok((TestReport::new("time_history", rows, seed, dut.sample_rate_hz()), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knee_scan_stops_at_first_violation() {
        let levels = [20.0, 21.0, 22.0, 23.0];
        let k = knee_from(&levels, &[0.0, 1.1, 0.1, 0.0], 0.6);
        assert!((k - 21.5).abs() < 1e-12);
        assert_eq!(knee_from(&levels, &[0.0, 0.0, 0.0, 0.0], 0.6), 20.0);
        assert_eq!(knee_from(&levels, &[0.0, 0.0, 0.0, 0.9], 0.6), 23.0);
    }

    #[test]
    fn oracle_knee_for_default_floor() {
        let k = oracle_knee(Some(29.9), 94.0, 20.0, 0.6);
        let closed = 29.9 - 10.0 * (10f64.powf(0.06) - 1.0).log10();
        assert!((k - closed).abs() < 0.01, "{k} vs {closed}");
        assert!((k - 38.2).abs() < 0.05);
        assert_eq!(oracle_knee(None, 94.0, 20.0, 0.6), 20.0);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
