use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acceptance interval for a deviation: `lower <= delta <= upper`.
/// `lower` is normally negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub upper: f64,
    pub lower: f64,
}

impl Bounds {
    pub const fn new(upper: f64, lower: f64) -> Self {
        Self { upper, lower }
    }

    pub const fn symmetric(b: f64) -> Self {
        Self { upper: b, lower: -b }
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, delta: f64) -> bool {
        delta <= self.upper + 1e-9 && delta >= self.lower - 1e-9
    }
}

impl std::fmt::Display for Bounds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if (self.upper + self.lower).abs() < 1e-12 {
            write!(f, "±{:.1}", self.upper)
        } else {
            write!(f, "+{:.1}/{:.1}", self.upper, self.lower)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub type1: Bounds,
    pub type2: Bounds,
}

impl ToleranceSpec {
    pub fn adjusted(&self) -> Result<Bounds> {
        adjusted_tolerance(self.type1, self.type2)
    }
}

/// Type-2 bounds shrunk by the reference meter's own type-1 bounds, side by
/// side: `(t2.upper - t1.upper, t2.lower - t1.lower)`.
pub fn adjusted_tolerance(type1: Bounds, type2: Bounds) -> Result<Bounds> {
    if type1.upper > type2.upper + 1e-12 || type1.lower < type2.lower - 1e-12 {
        return Err(Error::InvalidTolerance(format!(
            "type 1 bounds {type1} are wider than type 2 bounds {type2}"
        )));
    }
    Ok(Bounds {
        upper: type2.upper - type1.upper,
        lower: type2.lower - type1.lower,
    })
}

/// Octave test frequencies of the frequency-weighting test.
pub const OCTAVE_FREQS_HZ: [f64; 9] = [
    31.5, 63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0,
];

/// Type 1 / type 2 limits per octave, chosen so their difference gives the
/// adjusted limits of the frequency-weighting test.
pub fn frequency_tolerance(freq_hz: f64) -> Option<ToleranceSpec> {
    let (t1, t2) = match freq_hz {
        f if f == 31.5 => (2.0, 3.5),
        f if f == 63.0 => (1.5, 2.5),
        f if f == 125.0 => (1.5, 2.0),
        f if f == 250.0 || f == 500.0 => (1.4, 1.9),
        f if f == 1000.0 => (1.1, 1.4),
        f if f == 2000.0 => (1.6, 2.6),
        f if f == 4000.0 => (1.6, 3.6),
        f if f == 8000.0 => (2.6, 5.6),
        _ => return None,
    };
    Some(ToleranceSpec {
        type1: Bounds::symmetric(t1),
        type2: Bounds::symmetric(t2),
    })
}

/// Toneburst durations in seconds, longest first.
pub const TONEBURST_DURATIONS_S: [f64; 12] = [
    1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 0.0005, 0.00025,
];

/// Type 2 limits for the Fast toneburst response.
pub fn toneburst_bounds(duration_s: f64) -> Bounds {
    let ms = duration_s * 1000.0;
    if ms >= 100.0 - 1e-9 {
        Bounds::symmetric(1.0)
    } else if ms >= 50.0 - 1e-9 {
        Bounds::new(1.0, -1.5)
    } else if ms >= 10.0 - 1e-9 {
        Bounds::new(1.0, -2.0)
    } else if ms >= 2.0 - 1e-9 {
        Bounds::new(1.0, -2.5)
    } else if ms >= 1.0 - 1e-9 {
        Bounds::new(1.0, -3.0)
    } else if ms >= 0.5 - 1e-9 {
        Bounds::new(1.0, -4.0)
    } else {
        Bounds::new(1.5, -5.0)
    }
}

/// Closed-form Fast toneburst response relative to the steady reading.
pub fn toneburst_oracle_db(duration_s: f64, tau_s: f64) -> f64 {
    10.0 * (1.0 - (-duration_s / tau_s).exp()).log10()
}

pub const LINEARITY_BOUND_DB: f64 = 0.6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let a = adjusted_tolerance(Bounds::symmetric(1.0), Bounds::symmetric(2.0)).unwrap();
        assert_eq!(a, Bounds::symmetric(1.0));
        let z = adjusted_tolerance(Bounds::symmetric(1.0), Bounds::symmetric(1.0)).unwrap();
        assert_eq!(z.range(), 0.0);
        let s = adjusted_tolerance(Bounds::new(1.0, -1.5), Bounds::new(1.0, -2.0)).unwrap();
        assert_eq!(s, Bounds::new(0.0, -0.5));
        assert!(adjusted_tolerance(Bounds::symmetric(2.0), Bounds::symmetric(1.0)).is_err());
    }

    #[test]
    fn frequency_table_adjusted_values() {
        let expect = [1.5, 1.0, 0.5, 0.5, 0.5, 0.3, 1.0, 2.0, 3.0];
        for (f, e) in OCTAVE_FREQS_HZ.iter().zip(expect) {
            let a = frequency_tolerance(*f).unwrap().adjusted().unwrap();
            assert!((a.upper - e).abs() < 1e-9 && (a.lower + e).abs() < 1e-9, "{f}");
        }
        assert!(frequency_tolerance(440.0).is_none());
    }

    #[test]
    fn oracle_column() {
        let col = [0.0, -0.1, -1.0, -2.6, -4.8, -8.3, -11.1, -14.1, -18.0, -21.0, -24.0, -27.0];
        for (t, c) in TONEBURST_DURATIONS_S.iter().zip(col) {
            let d = toneburst_oracle_db(*t, 0.125);
            assert!((d - c).abs() < 0.1, "{t}: {d}");
        }
    }

    #[test]
    fn display() {
        assert_eq!(Bounds::symmetric(1.5).to_string(), "±1.5");
        assert_eq!(Bounds::new(1.0, -2.5).to_string(), "+1.0/-2.5");
    }
}
