use std::f64::consts::PI;

use acslm_core::compensation::{
    apply_compensation, average_responses, design_regularized_inverse, inverse_target_db,
    CompensationFilter, DEFAULT_TAPER_BAND, DEFAULT_TAPS,
};
use acslm_core::conformance::{NoiseAnchor, Pipeline};
use acslm_core::convolve::rfft;
use acslm_core::mic::{default_mic_curve, simulate_microphone, sine_amplitude_for_spl, MicResponseModel};
use acslm_core::response::{log_grid, MagnitudeResponse};
use acslm_core::{Error, SampleBuffer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const FS: u32 = 44_100;

fn default_filter() -> CompensationFilter {
    design_regularized_inverse(&default_mic_curve(), DEFAULT_TAPS, DEFAULT_TAPER_BAND, FS).unwrap()
}

#[test]
fn cascade_is_flat_and_edges_are_unity() {
    let mic = default_mic_curve();
    let inv = default_filter();
    assert_eq!(inv.len(), DEFAULT_TAPS);
    assert_eq!(inv.group_delay_samples(), (DEFAULT_TAPS - 1) / 2);
    assert!(inv.is_symmetric());
    let t = inv.taps();
    assert!((0..t.len()).all(|i| t[i] == t[t.len() - 1 - i]));
    for f in log_grid(100.0, 10_000.0, 48) {
        let c = mic.at(f) + inv.magnitude_db(f);
        assert!(c.abs() < 0.5, "{f} Hz cascade {c}");
    }
    assert!(inv.magnitude_db(20.0).abs() < 0.5);
    assert!(inv.magnitude_db(20_000.0).abs() < 0.5);
    assert!(inv.magnitude_db(0.0).abs() < 0.5);
    assert!(inv.magnitude_db(FS as f64 / 2.0).abs() < 0.5);
}

#[test]
fn identical_ensemble_averages_to_itself() {
    let c = default_mic_curve();
    let (avg, stats) = average_responses(&vec![c.clone(); 10]).unwrap();
    assert_eq!(stats.n, 10);
    assert!(stats.mean_std_db < 1e-9);
    assert!(stats.max_pairwise_diff_db < 1e-9);
    for f in log_grid(20.0, 20_000.0, 12) {
        assert!((avg.at(f) - c.at(f)).abs() < 0.02, "{f}");
    }
}

#[test]
fn jittered_ensemble_statistics() {
    let base = default_mic_curve();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jitter = Normal::new(0.0, 0.1).unwrap();
    let curves: Vec<MagnitudeResponse> = (0..10)
        .map(|_| {
            let grid = base.freqs_hz().to_vec();
            let lv = base.levels_db().iter().map(|l| l + jitter.sample(&mut rng)).collect();
            MagnitudeResponse::new(grid, lv).unwrap()
        })
        .collect();
    let (_, stats) = average_responses(&curves).unwrap();
    assert!((0.07..0.13).contains(&stats.mean_std_db), "{stats:?}");
    assert!(stats.max_pairwise_diff_db > 0.2 && stats.max_pairwise_diff_db < 1.5, "{stats:?}");
}

#[test]
fn deep_notch_cannot_be_inverted() {
    let notch = |f: f64| -40.0 * (-(((f / 150.0).log2() * 24.0).powi(2))).exp();
    let curve = MagnitudeResponse::from_fn(&log_grid(10.0, 22_000.0, 48), notch).unwrap();
    match design_regularized_inverse(&curve, DEFAULT_TAPS, DEFAULT_TAPER_BAND, FS) {
        Err(Error::FlatnessNotMet {
            achieved_error_db,
            worst_freq_hz,
            ..
        }) => {
            assert!(achieved_error_db > 1.0);
            assert!((120.0..190.0).contains(&worst_freq_hz), "{worst_freq_hz}");
        }
        other => panic!("expected FlatnessNotMet, got {other:?}"),
    }
}

#[test]
fn tone_amplitude_is_restored_through_mic_and_inverse() {
    let model = MicResponseModel::default().without_noise();
    let inv = default_filter();
    for f in [125.0, 1000.0, 6000.0] {
        let a = sine_amplitude_for_spl(94.0);
        let n = 2 * FS as usize;
        let x: Vec<f64> = (0..n).map(|i| a * (2.0 * PI * f * i as f64 / FS as f64).sin()).collect();
        let x = SampleBuffer::new(x, FS).unwrap();
        let y = simulate_microphone(&x, &model, None).unwrap();
        let y = apply_compensation(&y, &inv).unwrap();
        assert_eq!(y.len(), x.len());
        let tail = |s: &[f64]| {
            let t = &s[FS as usize / 2..n - FS as usize / 4];
            (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt()
        };
        let gain = 20.0 * (tail(y.samples()) / (tail(x.samples()) * model.sensitivity_v_per_pa() * 200.0)).log10();
        assert!(gain.abs() < 0.1, "{f} Hz: {gain}");
    }
}

#[test]
fn white_noise_spectrum_follows_target() {
    let mic = default_mic_curve();
    let inv = default_filter();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 1 << 19;
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            0.05 * v
        })
        .collect();
    let y = apply_compensation(&SampleBuffer::new(x.clone(), FS).unwrap(), &inv).unwrap();
    let seg = 8192;
    let welch = |s: &[f64]| {
        let mut acc = vec![0.0; seg / 2 + 1];
        let hann: Vec<f64> = (0..seg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos()).collect();
        for chunk in s[seg..s.len() - seg].chunks_exact(seg) {
            let w: Vec<f64> = chunk.iter().zip(&hann).map(|(v, h)| v * h).collect();
            for (a, c) in acc.iter_mut().zip(rfft(&w, seg)) {
                *a += c.norm_sqr();
            }
        }
        acc
    };
    let (px, py) = (welch(&x), welch(y.samples()));
    let bin = FS as f64 / seg as f64;
    for fc in log_grid(100.0, 10_000.0, 3) {
        let (lo, hi) = ((fc / 2f64.powf(1.0 / 6.0) / bin) as usize, (fc * 2f64.powf(1.0 / 6.0) / bin) as usize);
        let gx: f64 = px[lo..=hi].iter().sum();
        let gy: f64 = py[lo..=hi].iter().sum();
        let measured = 10.0 * (gy / gx).log10();
        let target = inverse_target_db(&mic, DEFAULT_TAPER_BAND, fc);
        assert!((measured - target).abs() < 0.5, "{fc} Hz: {measured} vs {target}");
    }
}

#[test]
fn compensation_raises_noise_floor_when_it_boosts_the_low_band() {
    // Exactly flat from 1 kHz up, falling towards 3 dB per octave below.
    let rolloff = MagnitudeResponse::from_fn(&log_grid(10.0, 22_050.0, 48), |f| {
        let x = (1000.0 / f).log2().max(0.0);
        -3.0 * x * x / (1.0 + x)
    })
    .unwrap();
    let mic = MicResponseModel {
        response: rolloff.clone(),
        ..MicResponseModel::default()
    };
    let inv = design_regularized_inverse(&rolloff, DEFAULT_TAPS, DEFAULT_TAPER_BAND, FS).unwrap();
    assert!(inv.magnitude_db(60.0) > 3.0);
    let floor = |comp: Option<CompensationFilter>| {
        let p = Pipeline::dut(FS, mic.clone(), comp)
            .unwrap()
            .with_noise_anchor(NoiseAnchor::Microphone)
            .calibrated()
            .unwrap();
        let silence = SampleBuffer::silence(10 * FS as usize, FS);
        let out = p.run(&silence, &[(FS as usize, 10 * FS as usize)]).unwrap();
        out.window_leq_db[0]
    };
    let plain = floor(None);
    let boosted = floor(Some(inv));
    assert!(boosted >= plain, "{boosted} < {plain}");
}

#[test]
fn cfir_file_round_trip() {
    let inv = default_filter();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inv.cfir");
    inv.save(&path).unwrap();
    let back = CompensationFilter::load(&path).unwrap();
    assert_eq!(back.taps(), inv.taps());
    assert_eq!(back.design_rate_hz(), FS);
    let mut bad = std::fs::read(&path).unwrap();
    bad[0] ^= 0xff;
    assert!(CompensationFilter::read_cfir(&bad[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn designs_are_exactly_symmetric(
        tilt in -3.0f64..3.0,
        peak in 0.0f64..6.0,
        centre in 2000.0f64..12_000.0,
        taps in 1024usize..4096,
    ) {
        let curve = MagnitudeResponse::from_fn(&log_grid(10.0, 22_050.0, 24), |f| {
            tilt * (f / 1000.0).log2() / 10.0 + peak * (-((f / centre).log2() * 2.0).powi(2)).exp()
        })
        .unwrap();
        let inv = design_regularized_inverse(&curve, taps, DEFAULT_TAPER_BAND, FS).unwrap();
        prop_assert_eq!(inv.len() % 2, 1);
        prop_assert!(inv.is_symmetric());
        let t = inv.taps();
        prop_assert!((0..t.len()).all(|i| t[i] == t[t.len() - 1 - i]));
    }
}
