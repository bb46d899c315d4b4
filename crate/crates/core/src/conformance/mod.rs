//! Virtual conformance battery: stimuli, adjusted tolerances, pipelines under
//! test, the individual tests and report rendering.

pub mod battery;
pub mod history;
pub mod pipeline;
pub mod report;
pub mod stimulus;
pub mod tolerance;

use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

pub use battery::{
    linearity_sources, test_frequency_weighting, test_level_linearity, test_self_noise,
    test_stability, test_time_history, test_toneburst, toneburst_points, LinearityReport,
    ToneburstPoint,
};
pub use history::{compare_time_histories, HistoryComparison};
pub use pipeline::{Drift, NoiseAnchor, Pipeline, RunOutput};
pub use report::{emit_report, ReportRow, SuiteReport, TestReport, SUITE_VERSION};
pub use stimulus::{gen_stimulus, RampSource, StimulusKind, StimulusSpec};
pub use tolerance::{adjusted_tolerance, Bounds, ToleranceSpec};

use crate::compensation::{design_regularized_inverse, DEFAULT_TAPER_BAND, DEFAULT_TAPS};
use crate::error::Result;
use crate::mic::MicResponseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Ideal meter measured against itself.
    Ideal,
    /// Default microphone model with its designed compensation filter.
    Dut,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ideal" => Ok(Profile::Ideal),
            "dut" => Ok(Profile::Dut),
            other => Err(format!("unknown profile '{other}' (ideal or dut)")),
        }
    }
}

/// The calibrated device-under-test pipeline for the default microphone
/// model, with compensation designed from that model's own curve.
pub fn default_dut(sample_rate_hz: u32, seed: u64, compensated: bool) -> Result<Pipeline> {
    let mic = MicResponseModel {
        seed,
        ..MicResponseModel::default()
    };
    let comp = if compensated {
        Some(design_regularized_inverse(
            &mic.response,
            DEFAULT_TAPS,
            DEFAULT_TAPER_BAND,
            sample_rate_hz,
        )?)
    } else {
        None
    };
    Pipeline::dut(sample_rate_hz, mic, comp)?.calibrated()
}

/// Runs the whole battery. Tests run in parallel; the report order is fixed.
pub fn run_suite(profile: Profile, seed: u64, sample_rate_hz: u32) -> Result<SuiteReport> {
    let reference = Pipeline::ideal(sample_rate_hz)?.calibrated()?;
    let (dut, noisy) = match profile {
        Profile::Ideal => {
            let flat = Pipeline::dut(sample_rate_hz, MicResponseModel::flat().without_noise(), None)?
                .named("ideal")
                .calibrated()?;
            (reference.clone(), flat)
        }
        Profile::Dut => {
            let d = default_dut(sample_rate_hz, seed, true)?;
            (d.clone(), d)
        }
    };
    let (dut, reference, noisy) = (&dut, &reference, &noisy);
    let reports = thread::scope(|s| {
        let jobs: Vec<thread::ScopedJoinHandle<'_, Result<TestReport>>> = vec![
            s.spawn(move || test_frequency_weighting(dut, reference, seed)),
            s.spawn(move || test_toneburst(dut, seed)),
            s.spawn(move || Ok(test_level_linearity(noisy, &linearity_sources(), seed)?.report)),
            s.spawn(move || Ok(test_stability(dut, battery::STABILITY_DURATION_S, seed)?.0)),
            s.spawn(move || Ok(test_self_noise(dut, battery::SELF_NOISE_DURATION_S, seed)?.0)),
            s.spawn(move || {
                Ok(test_time_history(dut, reference, battery::HISTORY_DURATION_S, seed)?.0)
            }),
        ];
        jobs.into_iter()
            .map(|j| j.join().expect("test thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(emit_report(reports, seed))
}
