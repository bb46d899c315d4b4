use acslm_core::conformance::battery::linearity_oracle_dba;
use acslm_core::conformance::{
    default_dut, run_suite, test_frequency_weighting, test_level_linearity, test_self_noise,
    test_stability, test_time_history, toneburst_points, Drift, Pipeline, Profile, RampSource,
    SuiteReport,
};
use acslm_core::meter::{WeightingKind, FLOOR_DB};
use acslm_core::mic::MicResponseModel;
use acslm_core::Error;

const FS: u32 = 44_100;

fn ideal() -> Pipeline {
    Pipeline::ideal(FS).unwrap().calibrated().unwrap()
}

fn one_k() -> [RampSource; 1] {
    [RampSource::Sine { freq_hz: 1000.0 }]
}

#[test]
fn ideal_meter_passes_against_itself() {
    let r = test_frequency_weighting(&ideal(), &ideal(), 1).unwrap();
    assert!(r.pass);
    for row in &r.rows {
        assert!(row.delta.unwrap().abs() < 1e-6, "{row:?}");
    }
}

#[test]
fn uncompensated_dut_fails_low_octaves() {
    let dut = default_dut(FS, 1, false).unwrap();
    let r = test_frequency_weighting(&dut, &ideal(), 1).unwrap();
    assert!(!r.pass);
    assert!(!r.row("31.5").unwrap().pass);
    assert!(r.row("1k").unwrap().pass);
}

#[test]
fn unweighted_toneburst_follows_the_exponential_oracle() {
    let z = Pipeline::ideal(FS)
        .unwrap()
        .with_weighting(WeightingKind::Z)
        .unwrap()
        .calibrated()
        .unwrap();
    for p in toneburst_points(&z, 1).unwrap() {
        assert!((p.measured_db - p.oracle_db).abs() < 0.1, "{p:?}");
    }
}

#[test]
fn toneburst_needs_max_hold() {
    let p = ideal().without_max_hold();
    assert!(matches!(toneburst_points(&p, 1), Err(Error::MissingMaxHold(_))));
}

#[test]
fn linearity_needs_a_noise_model() {
    assert!(matches!(
        test_level_linearity(&ideal(), &one_k(), 1),
        Err(Error::MissingNoiseModel(_))
    ));
}

#[test]
fn noiseless_chain_is_linear_down_to_the_lowest_step() {
    let p = Pipeline::dut(FS, MicResponseModel::flat().without_noise(), None)
        .unwrap()
        .calibrated()
        .unwrap();
    let r = test_level_linearity(&p, &one_k(), 1).unwrap();
    assert!(r.noise_floor_dba.is_none());
    assert!((r.curves[0].knee_dba - 20.0).abs() < 0.01, "{:?}", r.curves[0].knee_dba);
    assert!(r.report.pass);
}

#[test]
fn readings_follow_the_noise_sum_and_knee_tracks_the_floor() {
    let knee_for = |n: f64| {
        let mic = MicResponseModel {
            noise_floor_dba: n,
            ..MicResponseModel::flat()
        };
        let p = Pipeline::dut(FS, mic, None).unwrap().calibrated().unwrap();
        let r = test_level_linearity(&p, &one_k(), 3).unwrap();
        let c = &r.curves[0];
        for (l, reading) in c.levels_db.iter().zip(&c.readings_dba) {
            if *l >= n + 3.0 {
                let expect = linearity_oracle_dba(*l, n);
                assert!((reading - expect).abs() < 0.2, "N={n} L={l}: {reading} vs {expect}");
            }
        }
        c.knee_dba
    };
    let (k30, k25) = (knee_for(29.9), knee_for(25.0));
    assert!(k25 < k30, "{k25} !< {k30}");
    assert!((k30 - 38.2).abs() < 1.0);
}

#[test]
fn stability_passes_clean_and_fails_with_drift() {
    let (r, s) = test_stability(&ideal(), 1800.0, 1).unwrap();
    assert!(r.pass);
    assert!((s.end_mean_dba - s.start_mean_dba).abs() < 0.01);
    let drifting = ideal().with_drift(Drift {
        at_s: 900.0,
        gain_db: 0.5,
    });
    let (r, s) = test_stability(&drifting, 1800.0, 1).unwrap();
    assert!(!r.pass);
    assert!((s.end_mean_dba - s.start_mean_dba - 0.5).abs() < 0.02);
}

#[test]
fn self_noise_of_ideal_meter_is_the_floor_sentinel() {
    let (r, s) = test_self_noise(&ideal(), 10.0, 1).unwrap();
    assert!(r.pass);
    assert_eq!(s.mean_dba, FLOOR_DB);
    assert!(r.row("snr at 94").is_none());
}

#[test]
fn dut_self_noise_and_metrics() {
    let dut = default_dut(FS, 1, true).unwrap();
    let (r, s) = test_self_noise(&dut, 60.0, 1).unwrap();
    assert!(r.pass, "{r:?}");
    assert!((s.mean_dba - 29.9).abs() < 0.3);
    assert!((r.row("snr at 94").unwrap().measured - 64.1).abs() < 0.4);
    assert!((r.row("dynamic range").unwrap().measured - 88.1).abs() < 0.3);
}

#[test]
fn time_history_of_identical_chains_is_perfect() {
    let (r, c) = test_time_history(&ideal(), &ideal(), 20.0, 4).unwrap();
    assert!(r.pass);
    assert!((c.r_squared - 1.0).abs() < 1e-9);
    assert!(c.mean_abs_diff < 1e-9);
}

#[test]
fn uncalibrated_pipelines_are_rejected() {
    let raw = Pipeline::ideal(FS).unwrap();
    assert!(matches!(
        test_frequency_weighting(&raw, &ideal(), 1),
        Err(Error::Uncalibrated(_))
    ));
}

#[test]
fn ideal_suite_passes_and_is_deterministic() {
    let a = run_suite(Profile::Ideal, 1, FS).unwrap();
    assert!(a.overall_pass, "{}", a.to_table());
    assert_eq!(a.tests.len(), 6);
    let b = run_suite(Profile::Ideal, 1, FS).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    for key in ["suite_version", "seed", "tests", "overall_pass"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let row = &v["tests"][0]["rows"][0];
    for key in ["stimulus", "expected", "measured", "delta", "bound_lo", "bound_hi", "pass"] {
        assert!(row.get(key).is_some(), "{key}");
    }
    let back: SuiteReport = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(back, a);
}
