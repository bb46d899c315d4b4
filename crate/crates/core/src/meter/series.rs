use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::detector::TimeWeighting;
use super::weighting::WeightingKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub t_s: f64,
    pub level_db: f64,
}

/// Timestamped detector readings.
///
/// `weighting` is `None` when the readings came from a signal the caller had
/// already weighted. `max_level_db` is the max-hold value over every sample,
/// which is generally above the largest periodic reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplSeries {
    pub readings: Vec<Reading>,
    pub detector: TimeWeighting,
    pub weighting: Option<WeightingKind>,
    pub interval_s: f64,
    pub max_level_db: f64,
}

impl SplSeries {
    pub fn levels(&self) -> Vec<f64> {
        self.readings.iter().map(|r| r.level_db).collect()
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Readings with `from_s <= t <= to_s`.
    pub fn window(&self, from_s: f64, to_s: f64) -> impl Iterator<Item = &Reading> {
        self.readings
            .iter()
            .filter(move |r| r.t_s >= from_s - 1e-9 && r.t_s <= to_s + 1e-9)
    }

    /// Arithmetic mean of the readings' dB values within a time window.
    pub fn mean_db(&self, from_s: f64, to_s: f64) -> Option<f64> {
        let (sum, n) = self
            .window(from_s, to_s)
            .fold((0.0, 0usize), |(s, n), r| (s + r.level_db, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t_seconds", "level_dba"])?;
        for r in &self.readings {
            wr.write_record([format!("{:.6}", r.t_s), format!("{:.4}", r.level_db)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a `t_seconds,level_dba` CSV. Detector metadata is not stored in
    /// the file, so Fast weighting and the median reading spacing are assumed.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "t_seconds" || &headers[1] != "level_dba" {
            return Err(Error::InvalidBuffer(
                "series CSV must start with a t_seconds,level_dba header".into(),
            ));
        }
        let mut readings = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidBuffer(format!("bad number in row {rec:?}")))
            };
            readings.push(Reading {
                t_s: parse(0)?,
                level_db: parse(1)?,
            });
        }
        if readings.windows(2).any(|w| w[1].t_s <= w[0].t_s) {
            return Err(Error::InvalidBuffer(
                "series timestamps must be strictly increasing".into(),
            ));
        }
        let mut gaps: Vec<f64> = readings.windows(2).map(|w| w[1].t_s - w[0].t_s).collect();
        gaps.sort_by(|a, b| a.total_cmp(b));
        let interval_s = gaps.get(gaps.len() / 2).copied().unwrap_or(0.125);
        let max_level_db = readings
            .iter()
            .map(|r| r.level_db)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            readings,
            detector: TimeWeighting::FAST,
            weighting: None,
            interval_s,
            max_level_db,
        })
    }
}
