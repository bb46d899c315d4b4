use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter::SplSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryComparison {
    pub r_squared: f64,
    /// Statistics of `b - a`.
    pub mean_diff: f64,
    pub std_diff: f64,
    pub min_diff: f64,
    pub max_diff: f64,
    pub mean_abs_diff: f64,
    pub n: usize,
}

fn interp(s: &SplSeries, t: f64) -> f64 {
    let r = &s.readings;
    let i = r.partition_point(|x| x.t_s < t);
    if i == 0 {
        return r[0].level_db;
    }
    if i == r.len() {
        return r[r.len() - 1].level_db;
    }
    let (a, b) = (r[i - 1], r[i]);
    if (b.t_s - t).abs() < 1e-9 {
        return b.level_db;
    }
    a.level_db + (b.level_db - a.level_db) * (t - a.t_s) / (b.t_s - a.t_s)
}

/// Compares two level histories on the timestamps of `a` that fall inside
/// the time span of `b`, interpolating `b` linearly where needed.
pub fn compare_time_histories(a: &SplSeries, b: &SplSeries) -> Result<HistoryComparison> {
    if a.readings.is_empty() || b.readings.is_empty() {
        return Err(Error::HistoryTooShort(0));
    }
    let (b0, b1) = (b.readings[0].t_s, b.readings[b.readings.len() - 1].t_s);
    let pairs: Vec<(f64, f64)> = a
        .readings
        .iter()
        .filter(|r| r.t_s >= b0 - 1e-9 && r.t_s <= b1 + 1e-9)
        .map(|r| (r.level_db, interp(b, r.t_s)))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::HistoryTooShort(n));
    }
    let nf = n as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let r_squared = if saa > 0.0 && sbb > 0.0 {
        (sab * sab) / (saa * sbb)
    } else if saa == 0.0 && sbb == 0.0 {
        1.0
    } else {
        0.0
    };
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| y - x).collect();
    let mean_diff = diffs.iter().sum::<f64>() / nf;
    let std_diff = (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(HistoryComparison {
        r_squared,
        mean_diff,
        std_diff,
        min_diff: diffs.iter().copied().fold(f64::INFINITY, f64::min),
        max_diff: diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_abs_diff: diffs.iter().map(|d| d.abs()).sum::<f64>() / nf,
        n,
    })
}
