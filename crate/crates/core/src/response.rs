use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REF_FREQ_HZ: f64 = 1000.0;

/// A magnitude response in dB on an ascending frequency grid.
///
/// Values between grid points are interpolated linearly in log-frequency;
/// queries outside the grid hold the nearest edge value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeResponse {
    freqs_hz: Vec<f64>,
    levels_db: Vec<f64>,
    ref_freq_hz: f64,
}

impl MagnitudeResponse {
    pub fn new(freqs_hz: Vec<f64>, levels_db: Vec<f64>) -> Result<Self> {
        if freqs_hz.len() != levels_db.len() {
            return Err(Error::InvalidResponse(format!(
                "{} frequencies but {} levels",
                freqs_hz.len(),
                levels_db.len()
            )));
        }
        if freqs_hz.len() < 2 {
            return Err(Error::InvalidResponse("need at least two points".into()));
        }
        if freqs_hz.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidResponse("frequencies must be positive".into()));
        }
        if levels_db.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidResponse("levels must be finite".into()));
        }
        if freqs_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidResponse(
                "frequency grid must be strictly ascending".into(),
            ));
        }
        Ok(Self {
            freqs_hz,
            levels_db,
            ref_freq_hz: DEFAULT_REF_FREQ_HZ,
        })
    }

    /// Samples `f` on `grid`.
    pub fn from_fn(grid: &[f64], f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid.to_vec(), grid.iter().map(|&x| f(x)).collect())
    }

    pub fn flat(f_lo: f64, f_hi: f64) -> Self {
        Self::new(vec![f_lo, f_hi], vec![0.0, 0.0]).expect("flat response")
    }

    pub fn freqs_hz(&self) -> &[f64] {
        &self.freqs_hz
    }

    pub fn levels_db(&self) -> &[f64] {
        &self.levels_db
    }

    pub fn ref_freq_hz(&self) -> f64 {
        self.ref_freq_hz
    }

    pub fn len(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs_hz.is_empty()
    }

    pub fn f_min(&self) -> f64 {
        self.freqs_hz[0]
    }

    pub fn f_max(&self) -> f64 {
        *self.freqs_hz.last().unwrap()
    }

    pub fn covers(&self, f: f64) -> bool {
        f >= self.f_min() * (1.0 - 1e-9) && f <= self.f_max() * (1.0 + 1e-9)
    }

    pub fn at(&self, f: f64) -> f64 {
        let fr = &self.freqs_hz;
        if f <= fr[0] {
            return self.levels_db[0];
        }
        if f >= fr[fr.len() - 1] {
            return self.levels_db[fr.len() - 1];
        }
        let i = fr.partition_point(|&x| x <= f);
        let (f0, f1) = (fr[i - 1], fr[i]);
        let t = (f / f0).ln() / (f1 / f0).ln();
        self.levels_db[i - 1] + t * (self.levels_db[i] - self.levels_db[i - 1])
    }

    pub fn resample(&self, grid: &[f64]) -> Result<Self> {
        let mut out = Self::from_fn(grid, |f| self.at(f))?;
        out.ref_freq_hz = self.ref_freq_hz;
        Ok(out)
    }

    /// Shifted so the level at the reference frequency is 0 dB.
    pub fn normalized(&self) -> Self {
        let r = self.at(self.ref_freq_hz);
        self.map(|_, l| l - r)
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            freqs_hz: self.freqs_hz.clone(),
            levels_db: self
                .freqs_hz
                .iter()
                .zip(&self.levels_db)
                .map(|(&fr, &l)| f(fr, l))
                .collect(),
            ref_freq_hz: self.ref_freq_hz,
        }
    }

    pub fn negated(&self) -> Self {
        self.map(|_, l| -l)
    }

    /// Overlap of two grids, or `None` if they share no frequencies.
    pub fn overlap(&self, other: &Self) -> Option<(f64, f64)> {
        let lo = self.f_min().max(other.f_min());
        let hi = self.f_max().min(other.f_max());
        (lo < hi).then_some((lo, hi))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["freq_hz", "db"])?;
        for (f, l) in self.freqs_hz.iter().zip(&self.levels_db) {
            wr.write_record([format!("{f:.6}"), format!("{l:.6}")])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.len() < 2 || headers[0].trim() != "freq_hz" || headers[1].trim() != "db" {
            return Err(Error::InvalidResponse(
                "response CSV must start with a freq_hz,db header".into(),
            ));
        }
        let (mut freqs, mut levels) = (Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidResponse(format!("bad row {rec:?}")))
            };
            freqs.push(num(0)?);
            levels.push(num(1)?);
        }
        Self::new(freqs, levels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Log-spaced grid from `f_lo` to `f_hi` inclusive with `per_octave` points
/// per octave.
pub fn log_grid(f_lo: f64, f_hi: f64, per_octave: usize) -> Vec<f64> {
    let octaves = (f_hi / f_lo).log2();
    let n = (octaves * per_octave as f64).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| f_lo * (f_hi / f_lo).powf(i as f64 / n as f64))
        .collect()
}
