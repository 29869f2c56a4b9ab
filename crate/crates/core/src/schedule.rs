//! Interpolation schedules `kappa(t)` shared by every probability path.
//!
//! A schedule maps `[0, 1]` onto `[0, 1]` monotonically with `kappa(0) = 0`
//! and `kappa(1) = 1`. The geometric-average path uses `alpha_t = kappa(t)`
//! and `sigma_t = 1 - kappa(t)`.
//!
//! The cosine schedule is an extension commonly used for image models; it is
//! not required by the method itself.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators `1 - kappa` below this are treated as singular.
pub const SINGULAR_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Schedule {
    /// `kappa(t) = t`.
    #[default]
    Linear,
    /// `kappa(t) = t^p`, `p > 0`.
    Polynomial(f64),
    /// `kappa(t) = 1 - cos(pi t / 2)^2`.
    Cosine,
}

impl Schedule {
    pub fn polynomial(power: f64) -> Result<Self> {
        if !(power.is_finite() && power > 0.0) {
            return Err(Error::domain(format!("polynomial power must be positive, got {power}")));
        }
        Ok(Schedule::Polynomial(power))
    }

    /// Returns `(kappa(t), kappa_dot(t))`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("schedule time {t} outside [0, 1]")));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> (f64, f64) {
        match *self {
            Schedule::Linear => (t, 1.0),
            Schedule::Polynomial(p) => {
                let kd = if p == 1.0 { 1.0 } else { p * t.powf(p - 1.0) };
                (t.powf(p), kd)
            }
            Schedule::Cosine => {
                let c = (0.5 * PI * t).cos();
                (1.0 - c * c, 0.5 * PI * (PI * t).sin())
            }
        }
    }

    pub fn kappa(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(k, _)| k)
    }

    /// `kappa_dot / (1 - kappa)`, the hazard shared by the mixture generators.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        let (k, kd) = self.eval(t)?;
        if 1.0 - k < SINGULAR_GUARD {
            return Err(Error::Singularity { t, what: "1 - kappa" });
        }
        Ok(kd / (1.0 - k))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Linear => write!(f, "linear"),
            Schedule::Polynomial(p) => write!(f, "poly:{p}"),
            Schedule::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => match other.strip_prefix("poly:") {
                Some(p) => {
                    let p: f64 = p
                        .parse()
                        .map_err(|_| Error::Config(format!("bad polynomial power in {other:?}")))?;
                    Schedule::polynomial(p)
                }
                None => Err(Error::Config(format!(
                    "unknown schedule {other:?} (expected linear, poly:<p>, cosine)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Schedule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Schedule> for String {
    fn from(s: Schedule) -> String {
        s.to_string()
    }
}
